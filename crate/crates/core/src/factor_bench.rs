//! Shadow factor sampling and the severity grid.
//!
//! Four factors (intensity, size, shape, location), each at three severities,
//! give 81 shadowed variants of every clean face. Intensity picks the ambient
//! attenuation, size the fraction of the canvas covered by the occluder, shape
//! the complexity tercile of the silhouette and location the vertical third the
//! silhouette centroid is pinned to.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{load_field, FieldRole, Image, ScalarField};
use crate::rng::{rng_from_seed, sub_seed, BenchRng};
use crate::shadow_synth::{clamp_alpha, BetaMap, MatteConfig, ShadowForward};

/// Absolute tolerance on the covered area fraction.
pub const AREA_TOLERANCE: f64 = 0.01;
const MAX_BISECTION_STEPS: usize = 20;
const MAX_SCALE: f64 = 64.0;
const MAX_REDRAWS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Severity(u8);

impl Severity {
    pub const ALL: [Severity; 3] = [Severity(1), Severity(2), Severity(3)];

    pub fn new(level: u8) -> Result<Self> {
        match level {
            1..=3 => Ok(Severity(level)),
            other => Err(Error::InvalidSeverity(other)),
        }
    }

    pub fn level(self) -> u8 {
        self.0
    }

    fn index(self) -> usize {
        usize::from(self.0 - 1)
    }
}

impl TryFrom<u8> for Severity {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        Severity::new(v)
    }
}

impl From<Severity> for u8 {
    fn from(s: Severity) -> u8 {
        s.0
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    Intensity,
    Size,
    Shape,
    Location,
}

impl Factor {
    pub const ALL: [Factor; 4] = [Factor::Intensity, Factor::Size, Factor::Shape, Factor::Location];

    pub fn name(self) -> &'static str {
        match self {
            Factor::Intensity => "intensity",
            Factor::Size => "size",
            Factor::Shape => "shape",
            Factor::Location => "location",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub intensity_severity: Severity,
    pub size_severity: Severity,
    pub shape_severity: Severity,
    pub location_severity: Severity,
    pub rng_seed: u64,
}

impl FactorSpec {
    pub fn severity(&self, factor: Factor) -> Severity {
        match factor {
            Factor::Intensity => self.intensity_severity,
            Factor::Size => self.size_severity,
            Factor::Shape => self.shape_severity,
            Factor::Location => self.location_severity,
        }
    }

    /// Index of this cell in the 81-cell grid (intensity-major).
    pub fn cell_index(&self) -> usize {
        self.intensity_severity.index() * 27
            + self.size_severity.index() * 9
            + self.shape_severity.index() * 3
            + self.location_severity.index()
    }

    /// File-name tag, e.g. `i1s2h3l1`.
    pub fn tag(&self) -> String {
        format!(
            "i{}s{}h{}l{}",
            self.intensity_severity, self.size_severity, self.shape_severity, self.location_severity
        )
    }
}

/// Severities of grid cell `index` in `0..81`.
pub fn cell_severities(index: usize) -> [Severity; 4] {
    [index / 27, (index / 9) % 3, (index / 3) % 3, index % 3].map(|i| Severity::ALL[i])
}

/// Half-open ambient attenuation range for an intensity severity.
pub fn intensity_range(severity: Severity) -> (f64, f64) {
    [(0.8, 1.0), (0.4, 0.6), (0.0, 0.2)][severity.index()]
}

/// Covered-area range for a size severity.
pub fn area_range(severity: Severity) -> (f64, f64) {
    [(0.10, 0.20), (0.45, 0.55), (0.80, 0.90)][severity.index()]
}

/// Target centroid `(x, y)` for a location severity on an `H x W` canvas.
pub fn location_target(severity: Severity, height: usize, width: usize) -> (f64, f64) {
    let (h, w) = (height as f64, width as f64);
    let y = [h / 6.0, h / 2.0, 5.0 * h / 6.0][severity.index()];
    (w / 2.0, y)
}

/// Draws the ambient attenuation for an intensity severity.
pub fn sample_intensity(severity: Severity, rng: &mut impl Rng) -> f64 {
    let (lo, hi) = intensity_range(severity);
    clamp_alpha(rng.random_range(lo..hi))
}

const MOORE: [(isize, isize); 8] = [(-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1)];

struct Binary {
    h: usize,
    w: usize,
    on: Vec<bool>,
}

impl Binary {
    fn from_field(mask: &ScalarField) -> Self {
        Self {
            h: mask.height(),
            w: mask.width(),
            on: mask.data().iter().map(|v| *v >= 0.5).collect(),
        }
    }

    fn at(&self, x: isize, y: isize) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h && self.on[y as usize * self.w + x as usize]
    }

    fn component_count(&self) -> usize {
        let mut seen = vec![false; self.on.len()];
        let mut count = 0;
        let mut queue = VecDeque::new();
        for start in 0..self.on.len() {
            if !self.on[start] || seen[start] {
                continue;
            }
            count += 1;
            seen[start] = true;
            queue.push_back(start);
            while let Some(i) = queue.pop_front() {
                let (x, y) = ((i % self.w) as isize, (i / self.w) as isize);
                for (dx, dy) in MOORE {
                    let (nx, ny) = (x + dx, y + dy);
                    if self.at(nx, ny) {
                        let j = ny as usize * self.w + nx as usize;
                        if !seen[j] {
                            seen[j] = true;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        count
    }

    /// Outer boundary by Moore-neighbour tracing with Jacob's stopping rule.
    fn outer_contour(&self) -> Vec<(isize, isize)> {
        let Some(first) = self.on.iter().position(|b| *b) else {
            return Vec::new();
        };
        let start = ((first % self.w) as isize, (first / self.w) as isize);
        let mut contour = vec![start];
        let mut cur = start;
        // Raster order guarantees the west neighbour of the start is background.
        let mut back = 0usize;
        let mut first_dir = None;
        let limit = 4 * self.on.len() + 8;
        for _ in 0..limit {
            let Some(d) = (1..=8)
                .map(|i| (back + i) % 8)
                .find(|d| self.at(cur.0 + MOORE[*d].0, cur.1 + MOORE[*d].1))
            else {
                break;
            };
            if cur == start && first_dir == Some(d) {
                break;
            }
            if first_dir.is_none() {
                first_dir = Some(d);
            }
            let next = (cur.0 + MOORE[d].0, cur.1 + MOORE[d].1);
            let prev = MOORE[(d + 7) % 8];
            let prev_pos = (cur.0 + prev.0, cur.1 + prev.1);
            let rel = (prev_pos.0 - next.0, prev_pos.1 - next.1);
            back = MOORE.iter().position(|m| *m == rel).unwrap_or(0);
            cur = next;
            contour.push(cur);
        }
        if contour.len() > 1 && contour.last() == Some(&start) {
            contour.pop();
        }
        contour
    }
}

/// Shape complexity of a single-component silhouette.
///
/// With `d_i` the centroid distance of outer contour point `i` normalised by
/// the mean distance, the score is `0.5 * CV(d) + 0.5 * mean |d[i+1] - 2 d[i] + d[i-1]|`
/// (cyclic). Near zero for a disk, growing with radial spread and roughness.
pub fn shape_complexity(mask: &ScalarField) -> Result<f64> {
    let bin = Binary::from_field(mask);
    match bin.component_count() {
        0 => return Err(Error::EmptyMask),
        1 => {}
        n => return Err(Error::MultipleComponents(n)),
    }
    let (cx, cy) = mask.centroid().ok_or(Error::EmptyMask)?;
    let contour = bin.outer_contour();
    let d: Vec<f64> = contour
        .iter()
        .map(|(x, y)| ((*x as f64 + 0.5 - cx).powi(2) + (*y as f64 + 0.5 - cy).powi(2)).sqrt())
        .collect();
    let n = d.len();
    let mean = d.iter().sum::<f64>() / n as f64;
    if n < 3 || mean <= 0.0 {
        return Ok(0.0);
    }
    let d: Vec<f64> = d.iter().map(|v| v / mean).collect();
    let var = d.iter().map(|v| (v - 1.0).powi(2)).sum::<f64>() / n as f64;
    let roughness = (0..n)
        .map(|i| (d[(i + 1) % n] - 2.0 * d[i] + d[(i + n - 1) % n]).abs())
        .sum::<f64>()
        / n as f64;
    Ok(0.5 * var.sqrt() + 0.5 * roughness)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SilhouetteEntry {
    pub id: String,
    pub mask: ScalarField,
    pub complexity: f64,
    pub severity_bin: Severity,
}

/// Bin sizes for `n` items split into terciles; earlier bins take the remainder.
pub fn tercile_sizes(n: usize) -> [usize; 3] {
    let (base, rem) = (n / 3, n % 3);
    [0, 1, 2].map(|i| base + usize::from(i < rem))
}

/// Sorts `(id, complexity)` pairs by complexity (ties by id) and assigns
/// tercile bins. Returns entries in sorted order.
pub fn assign_bins(mut items: Vec<(String, f64)>) -> Vec<(String, f64, Severity)> {
    items.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    let sizes = tercile_sizes(items.len());
    let mut out = Vec::with_capacity(items.len());
    let mut it = items.into_iter();
    for (bin, size) in sizes.iter().enumerate() {
        for (id, e) in it.by_ref().take(*size) {
            out.push((id, e, Severity::ALL[bin]));
        }
    }
    out
}

/// Scores every mask and splits the library into complexity terciles.
pub fn bin_silhouettes(library: Vec<(String, ScalarField)>) -> Result<Vec<SilhouetteEntry>> {
    if library.is_empty() {
        return Err(Error::InvalidArgument("silhouette library is empty".into()));
    }
    let scored = library
        .into_iter()
        .map(|(id, mask)| {
            shape_complexity(&mask)
                .map(|e| (id.clone(), mask, e))
                .map_err(|err| Error::InvalidArgument(format!("silhouette {id}: {err}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let bins = assign_bins(scored.iter().map(|(id, _, e)| (id.clone(), *e)).collect());
    let mut masks: std::collections::HashMap<String, ScalarField> =
        scored.into_iter().map(|(id, m, _)| (id, m)).collect();
    Ok(bins
        .into_iter()
        .map(|(id, complexity, severity_bin)| SilhouetteEntry {
            mask: masks.remove(&id).expect("id present"),
            id,
            complexity,
            severity_bin,
        })
        .collect())
}

/// A binned silhouette library.
#[derive(Debug, Clone)]
pub struct SilhouetteLibrary {
    entries: Vec<SilhouetteEntry>,
}

impl SilhouetteLibrary {
    pub fn from_masks(masks: Vec<(String, ScalarField)>) -> Result<Self> {
        Ok(Self {
            entries: bin_silhouettes(masks)?,
        })
    }

    /// Loads every `<id>.png` in `dir` (sorted by file name).
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths: Vec<_> = read
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        let masks = paths
            .iter()
            .map(|p| {
                let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                load_field(p, FieldRole::Mask).map(|m| (id, m))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_masks(masks)
    }

    /// Built-in 12-shape starter set.
    pub fn starter() -> Self {
        Self::from_masks(starter_silhouettes()).expect("starter shapes are valid")
    }

    pub fn entries(&self) -> &[SilhouetteEntry] {
        &self.entries
    }

    pub fn bin(&self, severity: Severity) -> Vec<&SilhouetteEntry> {
        self.entries.iter().filter(|e| e.severity_bin == severity).collect()
    }

    pub fn get(&self, id: &str) -> Option<&SilhouetteEntry> {
        self.entries.iter().find(|e| e.id == id)
    }
}

const STARTER_SIZE: usize = 96;

fn polar_shape(radius: impl Fn(f64) -> f64) -> ScalarField {
    let c = STARTER_SIZE as f64 / 2.0;
    ScalarField::from_fn(STARTER_SIZE, STARTER_SIZE, FieldRole::Mask, |y, x| {
        let (dx, dy) = (x as f64 + 0.5 - c, y as f64 + 0.5 - c);
        let r = (dx * dx + dy * dy).sqrt();
        f64::from(u8::from(r <= radius(dy.atan2(dx))))
    })
    .expect("valid")
}

fn implicit_shape(inside: impl Fn(f64, f64) -> bool) -> ScalarField {
    let c = STARTER_SIZE as f64 / 2.0;
    ScalarField::from_fn(STARTER_SIZE, STARTER_SIZE, FieldRole::Mask, |y, x| {
        f64::from(u8::from(inside(x as f64 + 0.5 - c, y as f64 + 0.5 - c)))
    })
    .expect("valid")
}

fn star_radius(points: usize, outer: f64, inner: f64) -> impl Fn(f64) -> f64 {
    move |theta: f64| {
        // Distance to the polygon edge between alternating outer/inner vertices.
        let seg = std::f64::consts::PI / points as f64;
        let t = (theta + std::f64::consts::PI * 2.0) % (2.0 * seg);
        let (a, b, phi) = if t < seg {
            (outer, inner, t)
        } else {
            (inner, outer, t - seg)
        };
        let (ax, ay) = (a, 0.0);
        let (bx, by) = (b * seg.cos(), b * seg.sin());
        // Intersect the ray at angle phi with segment a-b.
        let (dx, dy) = (phi.cos(), phi.sin());
        let (ex, ey) = (bx - ax, by - ay);
        let denom = dx * ey - dy * ex;
        (ax * ey - ay * ex) / denom
    }
}

/// Procedural starter silhouettes (96x96): disk, ellipse, squircle, triangle,
/// leaf, flower, five- and eight-point stars, hand, cross, crescent and gear.
pub fn starter_silhouettes() -> Vec<(String, ScalarField)> {
    use std::f64::consts::PI;
    vec![
        ("disk".into(), polar_shape(|_| 30.0)),
        (
            "ellipse".into(),
            implicit_shape(|x, y| (x / 38.0).powi(2) + (y / 22.0).powi(2) <= 1.0),
        ),
        (
            "squircle".into(),
            implicit_shape(|x, y| (x / 30.0).powi(4) + (y / 30.0).powi(4) <= 1.0),
        ),
        (
            "triangle".into(),
            implicit_shape(|x, y| y <= 24.0 && y >= -32.0 + 2.0 * x.abs() * 0.9),
        ),
        (
            "leaf".into(),
            implicit_shape(|x, y| {
                (x - 22.0).powi(2) + y * y <= 40.0f64.powi(2) && (x + 22.0).powi(2) + y * y <= 40.0f64.powi(2)
            }),
        ),
        ("flower".into(), polar_shape(|t| 28.0 * (1.0 + 0.2 * (5.0 * t).cos()))),
        ("star5".into(), polar_shape(star_radius(5, 40.0, 17.0))),
        ("star8".into(), polar_shape(star_radius(8, 42.0, 14.0))),
        (
            "hand".into(),
            implicit_shape(|x, y| {
                let palm = (x / 20.0).powi(2) + ((y - 14.0) / 22.0).powi(2) <= 1.0;
                let finger = |cx: f64, top: f64| (x - cx).abs() <= 4.0 && y >= top && y <= 10.0;
                let thumb = {
                    let (u, v) = (x + 18.0 - (y - 12.0) * 0.8, y - 12.0);
                    u.abs() <= 4.5 && (-16.0..=6.0).contains(&v)
                };
                palm || finger(-13.0, -26.0)
                    || finger(-4.5, -36.0)
                    || finger(4.5, -34.0)
                    || finger(13.0, -24.0)
                    || thumb
            }),
        ),
        (
            "cross".into(),
            implicit_shape(|x, y| (x.abs() <= 9.0 && y.abs() <= 34.0) || (y.abs() <= 9.0 && x.abs() <= 34.0)),
        ),
        (
            "crescent".into(),
            implicit_shape(|x, y| x * x + y * y <= 34.0f64.powi(2) && (x - 16.0).powi(2) + y * y > 28.0f64.powi(2)),
        ),
        (
            "gear".into(),
            polar_shape(|t| if (12.0 * t + PI / 4.0).sin() >= 0.0 { 34.0 } else { 26.0 }),
        ),
    ]
}

/// Rasterisation of a silhouette scaled about its centroid and anchored on a canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacedMask {
    pub mask: ScalarField,
    pub scale: f64,
    /// Visible foreground fraction of the canvas.
    pub area_fraction: f64,
    /// Centroid of the full (unclipped) rasterised shape, `(x, y)`.
    pub centroid: (f64, f64),
    /// Fraction of the rasterised shape that fell outside the canvas.
    pub clip_fraction: f64,
}

fn bilinear_zero(src: &ScalarField, fx: f64, fy: f64) -> f64 {
    let (x0, y0) = (fx.floor(), fy.floor());
    let (tx, ty) = (fx - x0, fy - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let get = |x: isize, y: isize| {
        if x < 0 || y < 0 || x as usize >= src.width() || y as usize >= src.height() {
            0.0
        } else {
            src.get(y as usize, x as usize)
        }
    };
    let top = get(x0, y0) * (1.0 - tx) + get(x0 + 1, y0) * tx;
    let bot = get(x0, y0 + 1) * (1.0 - tx) + get(x0 + 1, y0 + 1) * tx;
    top * (1.0 - ty) + bot * ty
}

fn foreground_bbox(src: &ScalarField) -> Option<(f64, f64, f64, f64)> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..src.height() {
        for x in 0..src.width() {
            if src.get(y, x) > 0.0 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    (x0 != usize::MAX).then_some((x0 as f64, y0 as f64, x1 as f64, y1 as f64))
}

/// Scales `src` by `scale` about its foreground centroid, moves that centroid
/// to `anchor` and rasterises (bilinear, threshold 0.5) on an `H x W` canvas.
pub fn rasterize_scaled(src: &ScalarField, scale: f64, anchor: (f64, f64), dims: (usize, usize)) -> Result<PlacedMask> {
    let (height, width) = dims;
    let (scx, scy) = src.centroid().ok_or(Error::EmptyMask)?;
    let (bx0, by0, bx1, by1) = foreground_bbox(src).ok_or(Error::EmptyMask)?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("scale must be positive, got {scale}")));
    }
    // Canvas-space bounds of the scaled shape, padded by one pixel for the bilinear footprint.
    let cx0 = (anchor.0 + (bx0 - 1.0 - scx) * scale).floor() as isize - 1;
    let cx1 = (anchor.0 + (bx1 + 1.0 - scx) * scale).ceil() as isize + 1;
    let cy0 = (anchor.1 + (by0 - 1.0 - scy) * scale).floor() as isize - 1;
    let cy1 = (anchor.1 + (by1 + 1.0 - scy) * scale).ceil() as isize + 1;
    let mut data = vec![0.0; height * width];
    let (mut total, mut visible) = (0usize, 0usize);
    let (mut sx, mut sy) = (0.0, 0.0);
    for y in cy0..=cy1 {
        for x in cx0..=cx1 {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            let fx = scx + (px - anchor.0) / scale - 0.5;
            let fy = scy + (py - anchor.1) / scale - 0.5;
            if bilinear_zero(src, fx, fy) >= 0.5 {
                total += 1;
                sx += px;
                sy += py;
                if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
                    visible += 1;
                    data[y as usize * width + x as usize] = 1.0;
                }
            }
        }
    }
    let centroid = if total > 0 {
        (sx / total as f64, sy / total as f64)
    } else {
        anchor
    };
    Ok(PlacedMask {
        mask: ScalarField::new(height, width, FieldRole::Mask, data)?,
        scale,
        area_fraction: visible as f64 / (height * width) as f64,
        centroid,
        clip_fraction: if total > 0 {
            1.0 - visible as f64 / total as f64
        } else {
            0.0
        },
    })
}

/// Finds a scale (bisection, at most 20 steps after bracketing) so the visible
/// area fraction is within [`AREA_TOLERANCE`] of `target`.
pub fn fit_area(src: &ScalarField, target: f64, anchor: (f64, f64), dims: (usize, usize)) -> Result<PlacedMask> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "target fraction {target} outside (0, 1)"
        )));
    }
    let close = |p: &PlacedMask| (p.area_fraction - target).abs() <= AREA_TOLERANCE;
    let mut best: Option<PlacedMask> = None;
    let keep_best = |p: &PlacedMask, best: &mut Option<PlacedMask>| {
        let better = best
            .as_ref()
            .is_none_or(|b| (p.area_fraction - target).abs() < (b.area_fraction - target).abs());
        if better {
            *best = Some(p.clone());
        }
    };
    let mut lo = 0.0;
    let mut hi = 1.0;
    loop {
        let placed = rasterize_scaled(src, hi, anchor, dims)?;
        if close(&placed) {
            return Ok(placed);
        }
        keep_best(&placed, &mut best);
        if placed.area_fraction > target {
            break;
        }
        lo = hi;
        hi *= 2.0;
        if hi > MAX_SCALE {
            return Err(Error::UnreachableArea {
                target,
                best: best.map_or(0.0, |b| b.area_fraction),
            });
        }
    }
    for _ in 0..MAX_BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        let placed = rasterize_scaled(src, mid, anchor, dims)?;
        if close(&placed) {
            return Ok(placed);
        }
        keep_best(&placed, &mut best);
        if placed.area_fraction < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::UnreachableArea {
        target,
        best: best.map_or(0.0, |b| b.area_fraction),
    })
}

/// Rescales a mask about its centroid until it covers a fraction of the
/// canvas drawn uniformly from `range`.
pub fn rescale_mask_to_area(
    mask: &ScalarField,
    range: (f64, f64),
    dims: (usize, usize),
    rng: &mut impl Rng,
) -> Result<PlacedMask> {
    let (lo, hi) = range;
    if !(0.0 < lo && lo <= hi && hi < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "area range {range:?} not inside (0, 1)"
        )));
    }
    let target = if lo < hi { rng.random_range(lo..hi) } else { lo };
    let (cx, cy) = mask.centroid().ok_or(Error::EmptyMask)?;
    let anchor = (
        cx * dims.1 as f64 / mask.width() as f64,
        cy * dims.0 as f64 / mask.height() as f64,
    );
    fit_area(mask, target, anchor, dims)
}

/// Translates a mask by a whole-pixel offset so its centroid lands on the
/// location target. Foreground pushed off the canvas is clipped.
pub fn place_mask(mask: &ScalarField, location: Severity, dims: (usize, usize)) -> Result<PlacedMask> {
    let (height, width) = dims;
    let (cx, cy) = mask.centroid().ok_or(Error::EmptyMask)?;
    let (tx, ty) = location_target(location, height, width);
    let (sx, sy) = ((tx - cx).round() as isize, (ty - cy).round() as isize);
    let mut data = vec![0.0; height * width];
    let (mut total, mut visible) = (0usize, 0usize);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            let v = mask.get(y, x);
            if v < 0.5 {
                continue;
            }
            total += 1;
            let (nx, ny) = (x as isize + sx, y as isize + sy);
            if nx >= 0 && ny >= 0 && (nx as usize) < width && (ny as usize) < height {
                visible += 1;
                data[ny as usize * width + nx as usize] = v;
            }
        }
    }
    Ok(PlacedMask {
        mask: ScalarField::new(height, width, FieldRole::Mask, data)?,
        scale: 1.0,
        area_fraction: visible as f64 / (height * width) as f64,
        centroid: (cx + sx as f64, cy + sy as f64),
        clip_fraction: 1.0 - visible as f64 / total as f64,
    })
}

/// One line of the dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifestRecord {
    pub source_image: String,
    pub output_image: String,
    pub factor_spec: FactorSpec,
    pub alpha: f64,
    pub mask_id: String,
    pub area_fraction: f64,
    pub centroid: (f64, f64),
    pub complexity: f64,
    #[serde(default)]
    pub clip_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_image: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub attack: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack_result: Option<AttackSummary>,
}

/// Final parameters of an adversarial record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub theta: [f64; 6],
    pub mask_linf: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub best_iteration: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_nme: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_nme: Option<f64>,
}

/// Sampled parameters of one grid cell, before rendering.
#[derive(Debug, Clone)]
pub struct CellPlan {
    pub spec: FactorSpec,
    pub alpha: f64,
    pub mask_id: String,
    pub complexity: f64,
    pub target_area: f64,
    pub placed: PlacedMask,
}

/// Draws the parameters of one cell from its own seed.
pub fn plan_cell(
    severities: [Severity; 4],
    dims: (usize, usize),
    library: &SilhouetteLibrary,
    cell_seed: u64,
) -> Result<CellPlan> {
    let [intensity, size, shape, location] = severities;
    let mut rng: BenchRng = rng_from_seed(cell_seed);
    let alpha = sample_intensity(intensity, &mut rng);
    let bin = library.bin(shape);
    if bin.is_empty() {
        return Err(Error::InvalidArgument(format!("no silhouettes in shape bin {shape}")));
    }
    let anchor = location_target(location, dims.0, dims.1);
    let (lo, hi) = area_range(size);
    let mut last_err = None;
    for _ in 0..MAX_REDRAWS {
        let entry = bin[rng.random_range(0..bin.len())];
        let target = rng.random_range(lo..hi);
        match fit_area(&entry.mask, target, anchor, dims) {
            Ok(placed) => {
                return Ok(CellPlan {
                    spec: FactorSpec {
                        intensity_severity: intensity,
                        size_severity: size,
                        shape_severity: shape,
                        location_severity: location,
                        rng_seed: cell_seed,
                    },
                    alpha,
                    mask_id: entry.id.clone(),
                    complexity: entry.complexity,
                    target_area: target,
                    placed,
                })
            }
            Err(e @ Error::UnreachableArea { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.expect("at least one draw"))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RenderOptions {
    pub matte: MatteConfig,
    pub beta: BetaMap,
}

/// A rendered grid cell.
#[derive(Debug, Clone)]
pub struct GridSample {
    pub image: Image,
    pub mask: ScalarField,
    pub record: DatasetManifestRecord,
}

/// Output file name for a grid cell of `source_stem`.
pub fn grid_image_name(source_stem: &str, spec: &FactorSpec) -> String {
    format!("{source_stem}__{}.png", spec.tag())
}

/// Renders all 81 factor/severity combinations for one clean face.
///
/// Each cell draws from its own sub-seed of `seed`, so the output does not
/// depend on how cells are scheduled. `source_name` is the clean image's file
/// name; output and mask paths are recorded relative to the dataset root.
pub fn generate_grid(
    clean: &Image,
    depth: &ScalarField,
    library: &SilhouetteLibrary,
    seed: u64,
    source_name: &str,
    opts: &RenderOptions,
) -> Result<Vec<GridSample>> {
    depth.ensure_dims(clean.dims())?;
    (0..81)
        .into_par_iter()
        .map(|cell| render_cell(clean, depth, library, seed, source_name, opts, cell))
        .collect()
}

/// Renders a single grid cell; see [`generate_grid`].
pub fn render_cell(
    clean: &Image,
    depth: &ScalarField,
    library: &SilhouetteLibrary,
    seed: u64,
    source_name: &str,
    opts: &RenderOptions,
    cell: usize,
) -> Result<GridSample> {
    let plan = plan_cell(
        cell_severities(cell),
        clean.dims(),
        library,
        sub_seed(seed, cell as u64),
    )?;
    let forward = ShadowForward::run(clean, &plan.placed.mask, depth, plan.alpha, &opts.beta, &opts.matte)?;
    let stem = Path::new(source_name)
        .file_stem()
        .map_or_else(|| source_name.to_string(), |s| s.to_string_lossy().into_owned());
    let name = grid_image_name(&stem, &plan.spec);
    let record = DatasetManifestRecord {
        source_image: source_name.to_string(),
        output_image: format!("images/{name}"),
        factor_spec: plan.spec,
        alpha: plan.alpha,
        mask_id: plan.mask_id,
        area_fraction: plan.placed.area_fraction,
        centroid: plan.placed.centroid,
        complexity: plan.complexity,
        clip_fraction: plan.placed.clip_fraction,
        mask_image: Some(format!("masks/{name}")),
        attack: false,
        attack_result: None,
    };
    Ok(GridSample {
        image: forward.into_image(),
        mask: plan.placed.mask,
        record,
    })
}
