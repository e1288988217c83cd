//! Synthetic road scenes and noisy per-trip observations of them.
//!
//! A scene is a bundle of parallel lane dividers along a constant-curvature
//! road, optionally crossed by a stop line with a crosswalk beyond it.
//! Trips perturb the ground truth in a fixed order: rigid drift, element
//! dropout, truncation, point jitter, spurious elements.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    clip_element, polyline_length, ElementCategory, MapElement, NormalizationFrame, PerceivedTrip,
    Point2D, Scene,
};

/// Spacing of generated centerline samples, meters.
const SAMPLE_STEP: f64 = 2.0;
const STOP_LINE_MARGIN: f64 = 1.0;
const CROSSWALK_GAP: f64 = 1.5;
const CROSSWALK_DEPTH: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Side of the square scene window, meters.
    pub frame_size: f64,
    /// Inclusive range of lane dividers per scene.
    pub min_lanes: usize,
    pub max_lanes: usize,
    pub lane_spacing: f64,
    /// Largest total heading change along the road, radians.
    pub curvature: f64,
    pub stop_line_prob: f64,
    pub crosswalk_prob: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            frame_size: 60.0,
            min_lanes: 2,
            max_lanes: 4,
            lane_spacing: 3.5,
            curvature: 0.4,
            stop_line_prob: 0.6,
            crosswalk_prob: 0.6,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [("stop_line_prob", self.stop_line_prob), ("crosswalk_prob", self.crosswalk_prob)];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.frame_size.is_finite() && self.frame_size > 0.0) {
            return Err(Error::InvalidConfig("frame_size must be positive".into()));
        }
        if !(self.lane_spacing.is_finite() && self.lane_spacing > 0.0) {
            return Err(Error::InvalidConfig("lane_spacing must be positive".into()));
        }
        if !(self.curvature.is_finite() && self.curvature >= 0.0) {
            return Err(Error::InvalidConfig("curvature must be non-negative".into()));
        }
        if self.min_lanes == 0 || self.min_lanes > self.max_lanes {
            return Err(Error::InvalidConfig("lane range must satisfy 1 <= min <= max".into()));
        }
        // The whole bundle (plus a margin for the crossing elements) must
        // fit comfortably inside the window.
        let width = self.lane_spacing * (self.max_lanes - 1) as f64 + 2.0 * STOP_LINE_MARGIN;
        if width >= 0.5 * self.frame_size {
            return Err(Error::InvalidConfig(format!(
                "{} lanes at {} m spacing do not fit a {} m frame",
                self.max_lanes, self.lane_spacing, self.frame_size
            )));
        }
        Ok(())
    }

    pub fn frame(&self) -> Result<NormalizationFrame> {
        NormalizationFrame::centered(self.frame_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Normal,
    Rain,
    Night,
}

impl Severity {
    pub const ALL: [Severity; 3] = [Severity::Normal, Severity::Rain, Severity::Night];

    pub fn name(self) -> &'static str {
        match self {
            Severity::Normal => "normal",
            Severity::Rain => "rain",
            Severity::Night => "night",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub point_jitter_sigma: f64,
    pub trip_drift_sigma: f64,
    pub trip_rotation_sigma: f64,
    pub element_dropout_prob: f64,
    /// Expected spurious elements per trip.
    pub spurious_element_rate: f64,
    pub partial_observation_prob: f64,
    /// Label of the preset the values came from, if any.
    #[serde(default)]
    pub severity_preset: Option<Severity>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self::preset(Severity::Normal)
    }
}

impl NoiseConfig {
    pub fn preset(severity: Severity) -> Self {
        let (jitter, dropout, drift, rotation, spurious, partial) = match severity {
            Severity::Normal => (0.15, 0.05, 0.3, 0.002, 0.3, 0.1),
            Severity::Rain => (0.3, 0.15, 0.45, 0.004, 0.6, 0.2),
            Severity::Night => (0.45, 0.25, 0.6, 0.006, 1.0, 0.3),
        };
        Self {
            point_jitter_sigma: jitter,
            trip_drift_sigma: drift,
            trip_rotation_sigma: rotation,
            element_dropout_prob: dropout,
            spurious_element_rate: spurious,
            partial_observation_prob: partial,
            severity_preset: Some(severity),
        }
    }

    pub fn zero() -> Self {
        Self {
            point_jitter_sigma: 0.0,
            trip_drift_sigma: 0.0,
            trip_rotation_sigma: 0.0,
            element_dropout_prob: 0.0,
            spurious_element_rate: 0.0,
            partial_observation_prob: 0.0,
            severity_preset: None,
        }
    }

    /// Every field, in a fixed order, for monotonicity checks.
    pub fn magnitudes(&self) -> [f64; 6] {
        [
            self.point_jitter_sigma,
            self.trip_drift_sigma,
            self.trip_rotation_sigma,
            self.element_dropout_prob,
            self.spurious_element_rate,
            self.partial_observation_prob,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.magnitudes().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig("noise parameters must be finite and non-negative".into()));
        }
        if self.element_dropout_prob > 1.0 || self.partial_observation_prob > 1.0 {
            return Err(Error::InvalidConfig("noise probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Mixes a base seed with an index (SplitMix64 finalizer).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Road reference curve: a circular arc (or line) through `origin`.
struct Road {
    origin: Point2D,
    heading: f64,
    /// Signed curvature, 1/m.
    kappa: f64,
}

impl Road {
    /// Point at arc length `s` shifted `offset` meters to the left.
    fn at(&self, s: f64, offset: f64) -> Point2D {
        let theta = self.heading + self.kappa * s;
        let (x, y) = if self.kappa.abs() < 1e-12 {
            (s * self.heading.cos(), s * self.heading.sin())
        } else {
            (
                (theta.sin() - self.heading.sin()) / self.kappa,
                (self.heading.cos() - theta.cos()) / self.kappa,
            )
        };
        Point2D::new(
            self.origin.x + x - offset * theta.sin(),
            self.origin.y + y + offset * theta.cos(),
        )
    }
}

fn longest_piece(element: &MapElement, frame: &NormalizationFrame) -> Option<MapElement> {
    clip_element(element, frame)
        .into_iter()
        .max_by(|a, b| polyline_length(a).total_cmp(&polyline_length(b)))
}

/// Ground truth for one scene; trips are left empty.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let frame = config.frame()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = config.frame_size / 2.0;

    let lanes = rng.gen_range(config.min_lanes..=config.max_lanes);
    let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let span = 2.0 * config.frame_size;
    let bend = if config.curvature > 0.0 {
        rng.gen_range(-config.curvature..=config.curvature)
    } else {
        0.0
    };
    let shift = rng.gen_range(-0.15..0.15) * half;
    let road = Road {
        origin: Point2D::new(-shift * heading.sin(), shift * heading.cos()),
        heading,
        kappa: bend / span,
    };
    let offsets: Vec<f64> = (0..lanes)
        .map(|i| (i as f64 - (lanes - 1) as f64 / 2.0) * config.lane_spacing)
        .collect();

    let steps = (span / SAMPLE_STEP).ceil() as usize;
    let mut gt = Vec::new();
    for &offset in &offsets {
        let points = (0..=steps)
            .map(|k| road.at(-span / 2.0 + k as f64 * span / steps as f64, offset))
            .collect();
        let line = MapElement::open(ElementCategory::LaneDivider, points)?;
        gt.extend(longest_piece(&line, &frame));
    }

    let stop = rng.gen_bool(config.stop_line_prob);
    let crosswalk = rng.gen_bool(config.crosswalk_prob);
    let s0 = rng.gen_range(-0.3..0.3) * half;
    let (lo, hi) = (
        offsets[0] - STOP_LINE_MARGIN,
        offsets[lanes - 1] + STOP_LINE_MARGIN,
    );
    if stop {
        let line = MapElement::open(ElementCategory::StopLine, vec![road.at(s0, lo), road.at(s0, hi)])?;
        gt.extend(longest_piece(&line, &frame));
    }
    if crosswalk {
        let (a, b) = (s0 + CROSSWALK_GAP, s0 + CROSSWALK_GAP + CROSSWALK_DEPTH);
        let polygon = MapElement::polygon(
            ElementCategory::Crosswalk,
            vec![road.at(a, lo), road.at(a, hi), road.at(b, hi), road.at(b, lo)],
        )?;
        gt.extend(longest_piece(&polygon, &frame));
    }

    Ok(Scene {
        scene_id: format!("scene-{seed:016x}"),
        bounds: frame,
        gt_elements: gt,
        trips: Vec::new(),
    })
}

/// Contiguous sub-path covering arc lengths `[from, to]`.
fn sub_path(points: &[Point2D], from: f64, to: f64) -> Vec<Point2D> {
    let mut out = Vec::new();
    let mut walked = 0.0;
    for w in points.windows(2) {
        let len = w[0].distance(&w[1]);
        let (start, end) = (walked, walked + len);
        if end >= from && start <= to && len > 0.0 {
            let t0 = ((from - start) / len).clamp(0.0, 1.0);
            let t1 = ((to - start) / len).clamp(0.0, 1.0);
            if out.is_empty() {
                out.push(w[0].lerp(&w[1], t0));
            }
            out.push(w[0].lerp(&w[1], t1));
        }
        walked = end;
    }
    out
}

fn spurious_element(rng: &mut ChaCha8Rng, frame: &NormalizationFrame) -> Result<MapElement> {
    let category = ElementCategory::ALL[rng.gen_range(0..ElementCategory::COUNT)];
    let center = Point2D::new(
        rng.gen_range(frame.min_x..frame.max_x),
        rng.gen_range(frame.min_y..frame.max_y),
    );
    let angle = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let (c, s) = (angle.cos(), angle.sin());
    let at = |u: f64, v: f64| Point2D::new(center.x + u * c - v * s, center.y + u * s + v * c);
    match category {
        ElementCategory::Crosswalk => {
            let (w, d) = (rng.gen_range(3.0..8.0), rng.gen_range(2.0..4.0));
            MapElement::polygon(
                category,
                vec![at(-w / 2.0, -d / 2.0), at(w / 2.0, -d / 2.0), at(w / 2.0, d / 2.0), at(-w / 2.0, d / 2.0)],
            )
        }
        _ => {
            let len = rng.gen_range(3.0..12.0);
            let n = 4;
            let bend = rng.gen_range(-0.5..0.5);
            let points = (0..n)
                .map(|k| {
                    let u = -len / 2.0 + len * k as f64 / (n - 1) as f64;
                    at(u, bend * u * u / len)
                })
                .collect();
            MapElement::open(category, points)
        }
    }
}

/// One noisy observation of `gt`.
pub fn perturb_trip(
    gt: &[MapElement],
    frame: &NormalizationFrame,
    noise: &NoiseConfig,
    trip_id: u32,
    trip_seed: u64,
) -> Result<PerceivedTrip> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(trip_seed);
    let normal = |sigma: f64| Normal::new(0.0, sigma).expect("finite sigma");

    let (dx, dy) = (
        normal(noise.trip_drift_sigma).sample(&mut rng),
        normal(noise.trip_drift_sigma).sample(&mut rng),
    );
    let angle = normal(noise.trip_rotation_sigma).sample(&mut rng);
    let center = frame.center();
    let (c, s) = (angle.cos(), angle.sin());
    let rigid = |p: &Point2D| {
        let (x, y) = (p.x - center.x, p.y - center.y);
        Point2D::new(center.x + x * c - y * s + dx, center.y + x * s + y * c + dy)
    };
    let jitter = normal(noise.point_jitter_sigma);

    let mut elements = Vec::new();
    for element in gt {
        let mut points: Vec<Point2D> = element.points.iter().map(rigid).collect();
        if rng.gen_bool(noise.element_dropout_prob) {
            continue;
        }
        // Polygons are either seen whole or not at all.
        if !element.closed && rng.gen_bool(noise.partial_observation_prob) {
            let length = polyline_length(&MapElement::open(element.category, points.clone())?);
            let keep = rng.gen_range(0.5..=1.0) * length;
            let start = rng.gen_range(0.0..=length - keep);
            points = sub_path(&points, start, start + keep);
        }
        for p in &mut points {
            p.x += jitter.sample(&mut rng);
            p.y += jitter.sample(&mut rng);
        }
        elements.push(MapElement::new(element.category, points, element.closed)?);
    }
    let spurious = if noise.spurious_element_rate > 0.0 {
        Poisson::new(noise.spurious_element_rate)
            .expect("positive rate")
            .sample(&mut rng) as usize
    } else {
        0
    };
    for _ in 0..spurious {
        elements.push(spurious_element(&mut rng, frame)?);
    }

    let elements = elements
        .iter()
        .flat_map(|e| clip_element(e, frame))
        .collect();
    Ok(PerceivedTrip { trip_id, elements })
}

/// `scene_count` scenes, each observed by `trips_per_scene` trips.
pub fn generate_scenes(
    scene_count: usize,
    config: &SceneConfig,
    noise: &NoiseConfig,
    trips_per_scene: usize,
    seed: u64,
) -> Result<Vec<Scene>> {
    config.validate()?;
    noise.validate()?;
    (0..scene_count)
        .map(|i| {
            let scene_seed = derive_seed(seed, i as u64);
            let mut scene = generate_scene(config, scene_seed)?;
            for t in 0..trips_per_scene {
                let trip = perturb_trip(
                    &scene.gt_elements,
                    &scene.bounds,
                    noise,
                    t as u32,
                    derive_seed(scene_seed, t as u64),
                )?;
                scene.trips.push(trip);
            }
            Ok(scene)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::chamfer_distance;

    #[test]
    fn forced_counts() {
        let config = SceneConfig {
            min_lanes: 3,
            max_lanes: 3,
            stop_line_prob: 0.0,
            crosswalk_prob: 0.0,
            ..SceneConfig::default()
        };
        for seed in 0..20 {
            let scene = generate_scene(&config, seed).unwrap();
            assert_eq!(scene.gt_elements.len(), 3);
            assert!(scene.gt_elements.iter().all(|e| e.category == ElementCategory::LaneDivider));
        }
        let all = SceneConfig { stop_line_prob: 1.0, crosswalk_prob: 1.0, ..config };
        let scene = generate_scene(&all, 4).unwrap();
        assert_eq!(scene.gt_elements.len(), 5);
        assert!(scene.gt_elements.iter().any(|e| e.category == ElementCategory::Crosswalk && e.closed));
    }

    #[test]
    fn deterministic() {
        let config = SceneConfig::default();
        let a = generate_scenes(3, &config, &NoiseConfig::default(), 4, 7).unwrap();
        let b = generate_scenes(3, &config, &NoiseConfig::default(), 4, 7).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = generate_scenes(3, &config, &NoiseConfig::default(), 4, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn random_configs_stay_inside_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..100 {
            let config = SceneConfig {
                frame_size: rng.gen_range(30.0..100.0),
                min_lanes: 1,
                max_lanes: rng.gen_range(1..5),
                lane_spacing: rng.gen_range(2.0..4.0),
                curvature: rng.gen_range(0.0..1.5),
                stop_line_prob: rng.gen(),
                crosswalk_prob: rng.gen(),
                seed: i,
            };
            let scene = generate_scene(&config, i).unwrap();
            assert!(!scene.gt_elements.is_empty());
            for e in &scene.gt_elements {
                e.validate().unwrap();
                assert!(e.points.iter().all(|p| scene.bounds.contains(p)), "config {config:?}");
            }
        }
    }

    #[test]
    fn unfit_configs_rejected() {
        let config = SceneConfig { frame_size: 10.0, max_lanes: 6, ..SceneConfig::default() };
        assert!(matches!(generate_scene(&config, 0), Err(Error::InvalidConfig(_))));
        let config = SceneConfig { stop_line_prob: 1.5, ..SceneConfig::default() };
        assert!(config.validate().is_err());
    }

    #[test]
    fn zero_noise_is_identity() {
        let config = SceneConfig { stop_line_prob: 1.0, crosswalk_prob: 1.0, ..SceneConfig::default() };
        let scene = generate_scene(&config, 3).unwrap();
        let trip = perturb_trip(&scene.gt_elements, &scene.bounds, &NoiseConfig::zero(), 0, 9).unwrap();
        assert_eq!(trip.elements, scene.gt_elements);
        for (a, b) in trip.elements.iter().zip(&scene.gt_elements) {
            assert_eq!(chamfer_distance(&a.points, &b.points).unwrap(), 0.0);
        }
    }

    #[test]
    fn full_dropout_empties_trip() {
        let scene = generate_scene(&SceneConfig::default(), 3).unwrap();
        let noise = NoiseConfig { element_dropout_prob: 1.0, spurious_element_rate: 0.0, ..NoiseConfig::default() };
        let trip = perturb_trip(&scene.gt_elements, &scene.bounds, &noise, 0, 1).unwrap();
        assert!(trip.elements.is_empty());
    }

    #[test]
    fn jitter_standard_deviation() {
        // 10 000 points at the frame center, jitter only.
        let frame = NormalizationFrame::centered(1000.0).unwrap();
        let points = vec![Point2D::new(0.0, 0.0); 100];
        let gt: Vec<MapElement> = (0..100)
            .map(|_| MapElement::open(ElementCategory::LaneDivider, points.clone()).unwrap())
            .collect();
        let noise = NoiseConfig { point_jitter_sigma: 0.2, ..NoiseConfig::zero() };
        let trip = perturb_trip(&gt, &frame, &noise, 0, 42).unwrap();
        let xs: Vec<f64> = trip.elements.iter().flat_map(|e| e.points.iter().map(|p| p.x)).collect();
        assert_eq!(xs.len(), 10_000);
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt();
        assert!((0.19..=0.21).contains(&std), "std {std}");
    }

    #[test]
    fn truncation_keeps_at_least_half() {
        let line = MapElement::open(
            ElementCategory::LaneDivider,
            (0..11).map(|i| Point2D::new(i as f64 * 2.0 - 10.0, 0.0)).collect(),
        )
        .unwrap();
        let frame = NormalizationFrame::centered(60.0).unwrap();
        let noise = NoiseConfig { partial_observation_prob: 1.0, ..NoiseConfig::zero() };
        for seed in 0..50 {
            let trip = perturb_trip(std::slice::from_ref(&line), &frame, &noise, 0, seed).unwrap();
            let len = polyline_length(&trip.elements[0]);
            assert!((10.0 - 1e-9..=20.0 + 1e-9).contains(&len), "length {len}");
        }
    }

    #[test]
    fn presets_are_ordered() {
        let [n, r, x] = Severity::ALL.map(|s| NoiseConfig::preset(s).magnitudes());
        for i in 0..6 {
            assert!(n[i] <= r[i] && r[i] <= x[i]);
        }
        assert!(x[0] > n[0] && x[3] > n[3]);
    }
}
