//! Vector-map data model and deterministic geometric primitives.
//!
//! Coordinates are planar meters in a local frame. Closed elements
//! (polygons) store each vertex once; the closing edge from the last vertex
//! back to the first is implicit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Guard added to the norm product in [`cosine_similarity`].
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point2D {
    pub x: f64,
    pub y: f64,
}

impl Point2D {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &Point2D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn lerp(&self, other: &Point2D, t: f64) -> Point2D {
        Point2D::new(
            self.x + (other.x - self.x) * t,
            self.y + (other.y - self.y) * t,
        )
    }
}

impl From<[f64; 2]> for Point2D {
    fn from(v: [f64; 2]) -> Self {
        Point2D::new(v[0], v[1])
    }
}

impl From<Point2D> for [f64; 2] {
    fn from(p: Point2D) -> Self {
        [p.x, p.y]
    }
}

/// Semantic class of a map element. Integer code 3 is reserved for the
/// background / no-object class used by the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementCategory {
    LaneDivider,
    StopLine,
    Crosswalk,
}

impl ElementCategory {
    pub const ALL: [ElementCategory; 3] = [
        ElementCategory::LaneDivider,
        ElementCategory::StopLine,
        ElementCategory::Crosswalk,
    ];
    /// Number of foreground categories.
    pub const COUNT: usize = 3;
    /// Class index of the background / no-object class.
    pub const BACKGROUND: usize = 3;

    pub fn code(self) -> usize {
        match self {
            ElementCategory::LaneDivider => 0,
            ElementCategory::StopLine => 1,
            ElementCategory::Crosswalk => 2,
        }
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ElementCategory::LaneDivider => "lane_divider",
            ElementCategory::StopLine => "stop_line",
            ElementCategory::Crosswalk => "crosswalk",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }

    /// Crosswalks are polygons; the other categories are polylines.
    pub fn is_closed(self) -> bool {
        matches!(self, ElementCategory::Crosswalk)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapElement {
    pub category: ElementCategory,
    pub closed: bool,
    pub points: Vec<Point2D>,
}

impl MapElement {
    pub fn new(category: ElementCategory, points: Vec<Point2D>, closed: bool) -> Result<Self> {
        let element = Self {
            category,
            closed,
            points,
        };
        element.validate()?;
        Ok(element)
    }

    pub fn open(category: ElementCategory, points: Vec<Point2D>) -> Result<Self> {
        Self::new(category, points, false)
    }

    pub fn polygon(category: ElementCategory, points: Vec<Point2D>) -> Result<Self> {
        Self::new(category, points, true)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 2 {
            return Err(Error::InvalidElement(format!(
                "{} points, need at least 2",
                self.points.len()
            )));
        }
        if let Some(i) = self.points.iter().position(|p| !p.is_finite()) {
            return Err(Error::InvalidElement(format!("point {i} is not finite")));
        }
        if self.closed && self.points.len() > 2 && self.points.first() == self.points.last() {
            return Err(Error::InvalidElement(
                "closed element repeats its first point".into(),
            ));
        }
        Ok(())
    }

    /// Vertices followed by the first vertex again when the element is closed.
    fn path(&self) -> impl Iterator<Item = &Point2D> + '_ {
        let closing = if self.closed { self.points.first() } else { None };
        self.points.iter().chain(closing)
    }

    pub fn segments(&self) -> impl Iterator<Item = (Point2D, Point2D)> + '_ {
        self.path().zip(self.path().skip(1)).map(|(a, b)| (*a, *b))
    }
}

/// Axis-aligned box used both as scene bounds and as the min-max
/// normalization reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationFrame {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl NormalizationFrame {
    pub fn new(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Result<Self> {
        let frame = Self {
            min_x,
            min_y,
            max_x,
            max_y,
        };
        frame.validate()?;
        Ok(frame)
    }

    /// Square frame of side `size` centered on the origin.
    pub fn centered(size: f64) -> Result<Self> {
        Self::new(-size / 2.0, -size / 2.0, size / 2.0, size / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.min_x, self.min_y, self.max_x, self.max_y]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.max_x <= self.min_x || self.max_y <= self.min_y {
            return Err(Error::InvalidFrame(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    pub fn center(&self) -> Point2D {
        Point2D::new(
            0.5 * (self.min_x + self.max_x),
            0.5 * (self.min_y + self.max_y),
        )
    }

    pub fn contains(&self, p: &Point2D) -> bool {
        p.x >= self.min_x && p.x <= self.max_x && p.y >= self.min_y && p.y <= self.max_y
    }
}

/// Element set perceived by one vehicle trip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceivedTrip {
    pub trip_id: u32,
    pub elements: Vec<MapElement>,
}

/// One geographic tile: ground truth plus the crowdsourced trips over it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub bounds: NormalizationFrame,
    pub gt_elements: Vec<MapElement>,
    pub trips: Vec<PerceivedTrip>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        let mut ids: Vec<u32> = self.trips.iter().map(|t| t.trip_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidElement(format!(
                "scene {}: duplicate trip id",
                self.scene_id
            )));
        }
        for e in self
            .gt_elements
            .iter()
            .chain(self.trips.iter().flat_map(|t| &t.elements))
        {
            e.validate()?;
        }
        Ok(())
    }
}

pub fn normalize(p: Point2D, frame: &NormalizationFrame) -> Point2D {
    Point2D::new(
        (p.x - frame.min_x) / frame.width(),
        (p.y - frame.min_y) / frame.height(),
    )
}

pub fn denormalize(p: Point2D, frame: &NormalizationFrame) -> Point2D {
    Point2D::new(
        frame.min_x + p.x * frame.width(),
        frame.min_y + p.y * frame.height(),
    )
}

pub fn normalize_element(element: &MapElement, frame: &NormalizationFrame) -> MapElement {
    MapElement {
        points: element.points.iter().map(|p| normalize(*p, frame)).collect(),
        ..element.clone()
    }
}

pub fn denormalize_element(element: &MapElement, frame: &NormalizationFrame) -> MapElement {
    MapElement {
        points: element
            .points
            .iter()
            .map(|p| denormalize(*p, frame))
            .collect(),
        ..element.clone()
    }
}

/// Total length, including the closing segment of closed elements.
pub fn polyline_length(element: &MapElement) -> f64 {
    element.segments().map(|(a, b)| a.distance(&b)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Resampled {
    pub element: MapElement,
    /// Input had zero length; every output point is the same location.
    pub degenerate: bool,
}

/// Resamples to `n_points` at equal arc-length spacing.
///
/// Open elements keep both endpoints. Closed elements start at the original
/// first vertex and spread the points over the whole perimeter, so the
/// spacing is `perimeter / n_points`.
pub fn resample_uniform(element: &MapElement, n_points: usize) -> Result<Resampled> {
    if n_points < 2 {
        return Err(Error::InvalidElement(format!(
            "cannot resample to {n_points} points"
        )));
    }
    element.validate()?;
    let vertices: Vec<Point2D> = element.path().copied().collect();
    let mut cumulative = Vec::with_capacity(vertices.len());
    let mut total = 0.0;
    cumulative.push(0.0);
    for w in vertices.windows(2) {
        total += w[0].distance(&w[1]);
        cumulative.push(total);
    }

    if total <= 0.0 {
        return Ok(Resampled {
            element: MapElement {
                points: vec![vertices[0]; n_points],
                ..element.clone()
            },
            degenerate: true,
        });
    }

    let step = if element.closed {
        total / n_points as f64
    } else {
        total / (n_points - 1) as f64
    };
    let mut out = Vec::with_capacity(n_points);
    let mut seg = 0;
    for k in 0..n_points {
        let target = step * k as f64;
        while seg + 2 < cumulative.len() && cumulative[seg + 1] < target {
            seg += 1;
        }
        let seg_len = cumulative[seg + 1] - cumulative[seg];
        let t = if seg_len > 0.0 {
            ((target - cumulative[seg]) / seg_len).clamp(0.0, 1.0)
        } else {
            0.0
        };
        out.push(vertices[seg].lerp(&vertices[seg + 1], t));
    }
    if !element.closed {
        out[0] = vertices[0];
        out[n_points - 1] = *vertices.last().expect("validated element");
    }
    Ok(Resampled {
        element: MapElement {
            points: out,
            ..element.clone()
        },
        degenerate: false,
    })
}

pub fn manhattan_distance(a: Point2D, b: Point2D) -> f64 {
    (a.x - b.x).abs() + (a.y - b.y).abs()
}

/// Symmetric averaged Chamfer distance:
/// `0.5 * (mean_a min_b |a-b| + mean_b min_a |a-b|)`.
pub fn chamfer_distance(a: &[Point2D], b: &[Point2D]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let directed = |from: &[Point2D], to: &[Point2D]| {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| p.distance(q))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / from.len() as f64
    };
    Ok(0.5 * (directed(a, b) + directed(b, a)))
}

/// Consecutive-point difference vectors; closed elements include the
/// closing edge, so an element with n points yields n edges.
pub fn edge_vectors(element: &MapElement) -> Vec<[f64; 2]> {
    element
        .segments()
        .map(|(a, b)| [b.x - a.x, b.y - a.y])
        .collect()
}

pub fn cosine_similarity(u: [f64; 2], v: [f64; 2]) -> f64 {
    let dot = u[0] * v[0] + u[1] * v[1];
    let norms = u[0].hypot(u[1]) * v[0].hypot(v[1]);
    dot / (norms + COSINE_EPS)
}

/// Row-major binary occupancy grid. Row `r` covers
/// `y in [min_y + r*h, min_y + (r+1)*h)`; column `c` likewise in x.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryGrid {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<bool>,
}

impl BinaryGrid {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            cells: vec![false; rows * cols],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.cols + col]
    }

    pub fn count_ones(&self) -> usize {
        self.cells.iter().filter(|c| **c).count()
    }

    pub fn cell_center(&self, frame: &NormalizationFrame, row: usize, col: usize) -> Point2D {
        Point2D::new(
            frame.min_x + (col as f64 + 0.5) * frame.width() / self.cols as f64,
            frame.min_y + (row as f64 + 0.5) * frame.height() / self.rows as f64,
        )
    }
}

pub fn point_segment_distance(p: &Point2D, a: &Point2D, b: &Point2D) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return p.distance(a);
    }
    let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0);
    p.distance(&a.lerp(b, t))
}

/// Even-odd point-in-polygon test.
pub fn point_in_polygon(p: &Point2D, polygon: &[Point2D]) -> bool {
    let mut inside = false;
    let n = polygon.len();
    for i in 0..n {
        let a = polygon[i];
        let b = polygon[(i + 1) % n];
        if (a.y > p.y) != (b.y > p.y) {
            let x_cross = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x_cross {
                inside = !inside;
            }
        }
    }
    inside
}

/// Marks every cell whose center lies within `line_width / 2` of an
/// element, or inside a closed element.
pub fn rasterize(
    elements: &[MapElement],
    frame: &NormalizationFrame,
    rows: usize,
    cols: usize,
    line_width: f64,
) -> BinaryGrid {
    let mut grid = BinaryGrid::new(rows, cols);
    if rows == 0 || cols == 0 {
        return grid;
    }
    let half = line_width / 2.0;
    let cell_w = frame.width() / cols as f64;
    let cell_h = frame.height() / rows as f64;
    // Cells whose centers can fall in [lo, hi] along one axis.
    let col_range = |lo: f64, hi: f64| {
        let first = ((lo - frame.min_x) / cell_w - 0.5).ceil().max(0.0) as usize;
        let last = ((hi - frame.min_x) / cell_w - 0.5).floor();
        (first, if last < 0.0 { None } else { Some((last as usize).min(cols - 1)) })
    };
    let row_range = |lo: f64, hi: f64| {
        let first = ((lo - frame.min_y) / cell_h - 0.5).ceil().max(0.0) as usize;
        let last = ((hi - frame.min_y) / cell_h - 0.5).floor();
        (first, if last < 0.0 { None } else { Some((last as usize).min(rows - 1)) })
    };

    for element in elements {
        for (a, b) in element.segments() {
            let (c0, c1) = col_range(a.x.min(b.x) - half, a.x.max(b.x) + half);
            let (r0, r1) = row_range(a.y.min(b.y) - half, a.y.max(b.y) + half);
            let (Some(c1), Some(r1)) = (c1, r1) else {
                continue;
            };
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let center = grid.cell_center(frame, r, c);
                    if point_segment_distance(&center, &a, &b) <= half {
                        grid.cells[r * cols + c] = true;
                    }
                }
            }
        }
        if element.closed && element.points.len() >= 3 {
            let (min_x, max_x) = min_max(element.points.iter().map(|p| p.x));
            let (min_y, max_y) = min_max(element.points.iter().map(|p| p.y));
            let (c0, c1) = col_range(min_x, max_x);
            let (r0, r1) = row_range(min_y, max_y);
            let (Some(c1), Some(r1)) = (c1, r1) else {
                continue;
            };
            for r in r0..=r1 {
                for c in c0..=c1 {
                    if point_in_polygon(&grid.cell_center(frame, r, c), &element.points) {
                        grid.cells[r * cols + c] = true;
                    }
                }
            }
        }
    }
    grid
}

fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    })
}

/// Liang-Barsky clip of segment `a -> b` against `frame`. Returns the
/// parameter interval kept, if any.
fn clip_segment(a: &Point2D, b: &Point2D, frame: &NormalizationFrame) -> Option<(f64, f64)> {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    for (p, q) in [
        (-dx, a.x - frame.min_x),
        (dx, frame.max_x - a.x),
        (-dy, a.y - frame.min_y),
        (dy, frame.max_y - a.y),
    ] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    (t0 <= t1).then_some((t0, t1))
}

/// Point at parameter `t` along `a -> b`, snapped onto the frame boundary
/// when it lands within rounding distance of it.
fn clipped_point(a: &Point2D, b: &Point2D, t: f64, frame: &NormalizationFrame) -> Point2D {
    if t == 0.0 {
        return *a;
    }
    if t == 1.0 {
        return *b;
    }
    let mut p = a.lerp(b, t);
    let tol = 1e-9 * (frame.width() + frame.height());
    for edge in [frame.min_x, frame.max_x] {
        if (p.x - edge).abs() <= tol {
            p.x = edge;
        }
    }
    for edge in [frame.min_y, frame.max_y] {
        if (p.y - edge).abs() <= tol {
            p.y = edge;
        }
    }
    p.x = p.x.clamp(frame.min_x, frame.max_x);
    p.y = p.y.clamp(frame.min_y, frame.max_y);
    p
}

/// Clips an open polyline to `frame`; each maximal inside run becomes one
/// piece. Pieces reduced to a single point are dropped.
pub fn clip_polyline(points: &[Point2D], frame: &NormalizationFrame) -> Vec<Vec<Point2D>> {
    fn flush(current: &mut Vec<Point2D>, pieces: &mut Vec<Vec<Point2D>>) {
        if current.len() >= 2 {
            pieces.push(std::mem::take(current));
        }
        current.clear();
    }
    let mut pieces = Vec::new();
    let mut current: Vec<Point2D> = Vec::new();
    for w in points.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let Some((t0, t1)) = clip_segment(a, b, frame) else {
            flush(&mut current, &mut pieces);
            continue;
        };
        let start = clipped_point(a, b, t0, frame);
        let end = clipped_point(a, b, t1, frame);
        if current.last() != Some(&start) {
            flush(&mut current, &mut pieces);
            current.push(start);
        }
        if current.last() != Some(&end) {
            current.push(end);
        }
        if t1 < 1.0 {
            flush(&mut current, &mut pieces);
        }
    }
    flush(&mut current, &mut pieces);
    pieces
}

/// Sutherland-Hodgman clip of a polygon against `frame`.
pub fn clip_polygon(points: &[Point2D], frame: &NormalizationFrame) -> Vec<Point2D> {
    type Inside = fn(&Point2D, &NormalizationFrame) -> bool;
    type Cross = fn(&Point2D, &Point2D, &NormalizationFrame) -> Point2D;
    let edges: [(Inside, Cross); 4] = [
        (|p, f| p.x >= f.min_x, |a, b, f| {
            let t = (f.min_x - a.x) / (b.x - a.x);
            Point2D::new(f.min_x, a.y + t * (b.y - a.y))
        }),
        (|p, f| p.x <= f.max_x, |a, b, f| {
            let t = (f.max_x - a.x) / (b.x - a.x);
            Point2D::new(f.max_x, a.y + t * (b.y - a.y))
        }),
        (|p, f| p.y >= f.min_y, |a, b, f| {
            let t = (f.min_y - a.y) / (b.y - a.y);
            Point2D::new(a.x + t * (b.x - a.x), f.min_y)
        }),
        (|p, f| p.y <= f.max_y, |a, b, f| {
            let t = (f.max_y - a.y) / (b.y - a.y);
            Point2D::new(a.x + t * (b.x - a.x), f.max_y)
        }),
    ];
    let mut output = points.to_vec();
    for (inside, cross) in edges {
        if output.is_empty() {
            break;
        }
        let input = std::mem::take(&mut output);
        for i in 0..input.len() {
            let cur = input[i];
            let prev = input[(i + input.len() - 1) % input.len()];
            match (inside(&prev, frame), inside(&cur, frame)) {
                (true, true) => output.push(cur),
                (true, false) => output.push(cross(&prev, &cur, frame)),
                (false, true) => {
                    output.push(cross(&prev, &cur, frame));
                    output.push(cur);
                }
                (false, false) => {}
            }
        }
    }
    output.dedup();
    if output.len() > 1 && output.first() == output.last() {
        output.pop();
    }
    output
}

/// Clips an element to `frame`. Open elements may split into several
/// pieces; closed elements become the intersection polygon. Elements with
/// nothing left inside are dropped.
pub fn clip_element(element: &MapElement, frame: &NormalizationFrame) -> Vec<MapElement> {
    if element.points.iter().all(|p| frame.contains(p)) {
        return vec![element.clone()];
    }
    if element.closed {
        let polygon = clip_polygon(&element.points, frame);
        if polygon.len() >= 3 {
            vec![MapElement {
                points: polygon,
                ..element.clone()
            }]
        } else {
            Vec::new()
        }
    } else {
        clip_polyline(&element.points, frame)
            .into_iter()
            .map(|points| MapElement {
                points,
                ..element.clone()
            })
            .collect()
    }
}
