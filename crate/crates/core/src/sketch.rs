//! Polyline sketches: the stroke container, procedural shape classes with a
//! distortion knob, a differentiable point-set feature map used as the
//! classifier input, and a raster occupancy grid used as an appearance oracle.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config, invalid, Result};

pub type Point = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SketchSequence {
    strokes: Vec<Vec<Point>>,
}

impl SketchSequence {
    /// Requires ≥1 stroke, ≥2 points per stroke and coordinates in `[0, 1]`.
    pub fn new(strokes: Vec<Vec<Point>>) -> Result<Self> {
        validate_shape(&strokes)?;
        if strokes
            .iter()
            .flatten()
            .any(|p| !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]))
        {
            return Err(invalid("sketch coordinates must lie in [0, 1]"));
        }
        Ok(Self { strokes })
    }

    /// Clamps every coordinate into `[0, 1]`.
    pub fn from_clamped(mut strokes: Vec<Vec<Point>>) -> Result<Self> {
        validate_shape(&strokes)?;
        for p in strokes.iter_mut().flatten() {
            p[0] = p[0].clamp(0.0, 1.0);
            p[1] = p[1].clamp(0.0, 1.0);
        }
        Ok(Self { strokes })
    }

    pub fn strokes(&self) -> &[Vec<Point>] {
        &self.strokes
    }

    pub fn stroke_count(&self) -> usize {
        self.strokes.len()
    }

    pub fn point_count(&self) -> usize {
        self.strokes.iter().map(Vec::len).sum()
    }

    /// Keeps the strokes whose indices are listed, in their original order.
    pub fn subset(&self, keep: &[usize]) -> Result<Self> {
        let mut idx: Vec<usize> = keep.to_vec();
        idx.sort_unstable();
        idx.dedup();
        if idx.is_empty() || idx.iter().any(|&i| i >= self.strokes.len()) {
            return Err(invalid("stroke subset must be non-empty and in range"));
        }
        Ok(Self {
            strokes: idx.iter().map(|&i| self.strokes[i].clone()).collect(),
        })
    }

    pub fn features(&self) -> Vec<f64> {
        sketch_features(&self.strokes)
    }

    pub fn raster(&self) -> Vec<f64> {
        raster_features(&self.strokes)
    }
}

fn validate_shape(strokes: &[Vec<Point>]) -> Result<()> {
    if strokes.is_empty() {
        return Err(invalid("sketch needs at least one stroke"));
    }
    if strokes.iter().any(|s| s.len() < 2) {
        return Err(invalid("every stroke needs at least two points"));
    }
    if strokes
        .iter()
        .flatten()
        .any(|p| !p[0].is_finite() || !p[1].is_finite())
    {
        return Err(invalid("sketch coordinates must be finite"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
    Star,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [
        ShapeClass::Circle,
        ShapeClass::Square,
        ShapeClass::Triangle,
        ShapeClass::Star,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| invalid(format!("shape class index {i} out of range")))
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Circle => "circle",
            ShapeClass::Square => "square",
            ShapeClass::Triangle => "triangle",
            ShapeClass::Star => "star",
        }
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeClass {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| config(format!("unknown shape class '{s}'")))
    }
}

/// Drawing sub-style. `Turned` rotates the shape by 0.6 rad and shrinks it to
/// about a third of its size, which makes it the harder sub-style to recognise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Pose {
    #[default]
    Upright,
    Turned,
}

const CENTRE: f64 = 0.5;
const RADIUS: f64 = 0.35;
const POINTS_PER_EDGE: usize = 8;

/// Jitter standard deviation at distortion 1.
pub const JITTER_AT_ONE: f64 = 0.2;
/// Warp amplitude at distortion 1; the warp grows with distortion².
pub const WARP_AT_ONE: f64 = 0.45;

fn segment(a: Point, b: Point, n: usize) -> Vec<Point> {
    (0..n)
        .map(|k| {
            let t = k as f64 / (n - 1) as f64;
            [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
        })
        .collect()
}

fn polygon_vertex(k: usize, sides: usize, r: f64) -> Point {
    let phi = PI / 2.0 + 2.0 * PI * k as f64 / sides as f64;
    [r * phi.cos(), r * phi.sin()]
}

/// Undistorted strokes, centred on the origin before placement.
fn template(class: ShapeClass) -> Vec<Vec<Point>> {
    match class {
        ShapeClass::Circle => (0..2)
            .map(|half| {
                (0..2 * POINTS_PER_EDGE)
                    .map(|k| {
                        let t = k as f64 / (2 * POINTS_PER_EDGE - 1) as f64;
                        let phi = PI * (half as f64 + t);
                        [RADIUS * phi.cos(), RADIUS * phi.sin()]
                    })
                    .collect()
            })
            .collect(),
        ShapeClass::Square => {
            let h = RADIUS * 0.85;
            let v = [[-h, -h], [h, -h], [h, h], [-h, h]];
            (0..4)
                .map(|k| segment(v[k], v[(k + 1) % 4], POINTS_PER_EDGE))
                .collect()
        }
        ShapeClass::Triangle => (0..3)
            .map(|k| {
                segment(
                    polygon_vertex(k, 3, RADIUS),
                    polygon_vertex(k + 1, 3, RADIUS),
                    POINTS_PER_EDGE,
                )
            })
            .collect(),
        ShapeClass::Star => (0..5)
            .map(|k| {
                segment(
                    polygon_vertex(2 * k, 5, RADIUS),
                    polygon_vertex(2 * k + 2, 5, RADIUS),
                    POINTS_PER_EDGE,
                )
            })
            .collect(),
    }
}

fn place(strokes: Vec<Vec<Point>>, pose: Pose) -> Vec<Vec<Point>> {
    let (angle, scale) = match pose {
        Pose::Upright => (0.0, 1.0),
        Pose::Turned => (0.6f64, 0.35),
    };
    let (s, c) = angle.sin_cos();
    strokes
        .into_iter()
        .map(|st| {
            st.into_iter()
                .map(|p| {
                    [
                        CENTRE + scale * (c * p[0] - s * p[1]),
                        CENTRE + scale * (s * p[0] + c * p[1]),
                    ]
                })
                .collect()
        })
        .collect()
}

/// The exact parametric strokes of a class.
pub fn clean_shape(class: ShapeClass, pose: Pose) -> SketchSequence {
    SketchSequence {
        strokes: place(template(class), pose),
    }
}

/// A generated sketch together with the indices (into the clean shape) of the
/// strokes that survived dropout.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSketch {
    pub sketch: SketchSequence,
    pub kept_strokes: Vec<usize>,
}

pub fn gen_sketch(class: ShapeClass, distortion: f64, seed: u64) -> Result<SketchSequence> {
    gen_sketch_traced(class, Pose::Upright, distortion, seed).map(|g| g.sketch)
}

/// Clean shape, then a smooth sinusoidal warp (amplitude ∝ distortion²),
/// per-point Gaussian jitter (σ ∝ distortion), stroke dropout with
/// probability distortion/2 (at least one stroke kept) and clamping to the
/// unit square.
pub fn gen_sketch_traced(
    class: ShapeClass,
    pose: Pose,
    distortion: f64,
    seed: u64,
) -> Result<GeneratedSketch> {
    if !(0.0..=1.0).contains(&distortion) {
        return Err(invalid(format!(
            "distortion must lie in [0, 1], got {distortion}"
        )));
    }
    let clean = place(template(class), pose);
    if distortion == 0.0 {
        let kept = (0..clean.len()).collect();
        return Ok(GeneratedSketch {
            sketch: SketchSequence { strokes: clean },
            kept_strokes: kept,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amp = WARP_AT_ONE * distortion * distortion;
    let freq: [f64; 2] = [rng.random_range(0.5..1.5), rng.random_range(0.5..1.5)];
    let phase: [f64; 2] = [
        rng.random_range(0.0..2.0 * PI),
        rng.random_range(0.0..2.0 * PI),
    ];
    let sigma = JITTER_AT_ONE * distortion;
    let mut strokes: Vec<Vec<Point>> = clean
        .into_iter()
        .map(|st| {
            st.into_iter()
                .map(|p| {
                    let wx = amp * (2.0 * PI * freq[0] * p[1] + phase[0]).sin();
                    let wy = amp * (2.0 * PI * freq[1] * p[0] + phase[1]).sin();
                    let jx: f64 = rng.sample(StandardNormal);
                    let jy: f64 = rng.sample(StandardNormal);
                    [
                        (p[0] + wx + sigma * jx).clamp(0.0, 1.0),
                        (p[1] + wy + sigma * jy).clamp(0.0, 1.0),
                    ]
                })
                .collect()
        })
        .collect();
    let drop_p = distortion / 2.0;
    let mut kept: Vec<usize> = (0..strokes.len())
        .filter(|_| !rng.random_bool(drop_p))
        .collect();
    if kept.is_empty() {
        kept.push(rng.random_range(0..strokes.len()));
    }
    strokes = kept.iter().map(|&i| strokes[i].clone()).collect();
    Ok(GeneratedSketch {
        sketch: SketchSequence { strokes },
        kept_strokes: kept,
    })
}

/// A random-walk stroke of `points` points (≥ 2) starting anywhere in the
/// unit square, with heading changes of up to ±1.2 rad per step.
pub fn gen_scribble(points: usize, seed: u64) -> Result<Vec<Point>> {
    if points < 2 {
        return Err(invalid("a scribble needs at least two points"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
    let mut heading: f64 = rng.random_range(0.0..2.0 * PI);
    let mut out = vec![p];
    for _ in 1..points {
        heading += rng.random_range(-1.2..1.2);
        let step = rng.random_range(0.03..0.09);
        p = [
            (p[0] + step * heading.cos()).clamp(0.0, 1.0),
            (p[1] + step * heading.sin()).clamp(0.0, 1.0),
        ];
        out.push(p);
    }
    Ok(out)
}

/// `n` points at equal arc-length spacing over all strokes (pen-up jumps are
/// not counted). Requires `n ≥ 2`.
pub fn resample(sketch: &SketchSequence, n: usize) -> Result<Vec<Point>> {
    if n < 2 {
        return Err(invalid("resampling needs at least two points"));
    }
    let segs: Vec<(Point, Point, f64)> = sketch
        .strokes
        .iter()
        .flat_map(|st| st.windows(2).map(|w| (w[0], w[1], dist(w[0], w[1]))))
        .collect();
    let total: f64 = segs.iter().map(|s| s.2).sum();
    if total <= 0.0 {
        let p = sketch.strokes[0][0];
        return Ok(vec![p; n]);
    }
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    let mut acc = 0.0;
    for k in 0..n {
        let target = total * k as f64 / (n - 1) as f64;
        while seg + 1 < segs.len() && acc + segs[seg].2 < target {
            acc += segs[seg].2;
            seg += 1;
        }
        let (a, b, len) = segs[seg];
        let t = if len > 0.0 {
            ((target - acc) / len).clamp(0.0, 1.0)
        } else {
            0.0
        };
        out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
    }
    Ok(out)
}

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub const OCCUPANCY_GRID: usize = 6;
pub const ORIENTATION_GRID: usize = 3;
pub const STROKE_SLOTS: usize = 4;
const ORIENT_EPS: f64 = 1e-6;
const ROUGHNESS_SCALE: f64 = 100.0;

/// Length of [`sketch_features`].
pub const FEATURE_DIM: usize = OCCUPANCY_GRID * OCCUPANCY_GRID
    + 2 * ORIENTATION_GRID * ORIENTATION_GRID
    + 3 * STROKE_SLOTS
    + 2;

fn grid_centres(g: usize) -> Vec<Point> {
    let mut c = Vec::with_capacity(g * g);
    for i in 0..g {
        for j in 0..g {
            c.push([(j as f64 + 0.5) / g as f64, (i as f64 + 0.5) / g as f64]);
        }
    }
    c
}

fn rbf(p: Point, c: Point, width: f64) -> f64 {
    let d2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
    (-d2 / (2.0 * width * width)).exp()
}

/// Fixed-length descriptor of a sketch, smooth in the point coordinates:
///
/// * mean Gaussian occupancy of a 6×6 grid of centres;
/// * per 3×3 region, segment orientation `|d|·(cos 2φ, sin 2φ)` summed over
///   segments, weighted by the midpoint's Gaussian membership;
/// * per stroke slot (stroke index mod 4), mean of `(x, y, 1)`;
/// * scaled mean squared second difference (roughness);
/// * stroke count / 5.
pub fn sketch_features(strokes: &[Vec<Point>]) -> Vec<f64> {
    let mut out = vec![0.0; FEATURE_DIM];
    let n_points: usize = strokes.iter().map(Vec::len).sum();
    let inv_n = 1.0 / n_points.max(1) as f64;
    let occ = grid_centres(OCCUPANCY_GRID);
    let occ_w = 1.0 / OCCUPANCY_GRID as f64;
    let ori = grid_centres(ORIENTATION_GRID);
    let ori_w = 1.0 / ORIENTATION_GRID as f64;
    let o_off = OCCUPANCY_GRID * OCCUPANCY_GRID;
    let s_off = o_off + 2 * ori.len();
    let r_off = s_off + 3 * STROKE_SLOTS;
    let mut rough = 0.0;
    let mut rough_n = 0usize;
    for (si, st) in strokes.iter().enumerate() {
        let slot = si % STROKE_SLOTS;
        for p in st {
            for (k, c) in occ.iter().enumerate() {
                out[k] += rbf(*p, *c, occ_w) * inv_n;
            }
            out[s_off + 3 * slot] += p[0] * inv_n;
            out[s_off + 3 * slot + 1] += p[1] * inv_n;
            out[s_off + 3 * slot + 2] += inv_n;
        }
        for w in st.windows(2) {
            let (dx, dy) = (w[1][0] - w[0][0], w[1][1] - w[0][1]);
            let len = (dx * dx + dy * dy + ORIENT_EPS * ORIENT_EPS).sqrt();
            let (ox, oy) = ((dx * dx - dy * dy) / len, 2.0 * dx * dy / len);
            let mid = [0.5 * (w[0][0] + w[1][0]), 0.5 * (w[0][1] + w[1][1])];
            for (k, c) in ori.iter().enumerate() {
                let m = rbf(mid, *c, ori_w);
                out[o_off + 2 * k] += m * ox;
                out[o_off + 2 * k + 1] += m * oy;
            }
        }
        for w in st.windows(3) {
            let ax = w[2][0] - 2.0 * w[1][0] + w[0][0];
            let ay = w[2][1] - 2.0 * w[1][1] + w[0][1];
            rough += ax * ax + ay * ay;
            rough_n += 1;
        }
    }
    if rough_n > 0 {
        out[r_off] = ROUGHNESS_SCALE * rough / rough_n as f64;
    }
    out[r_off + 1] = strokes.len() as f64 / 5.0;
    out
}

/// Vector-Jacobian product of [`sketch_features`]: given `∂L/∂features`,
/// returns `∂L/∂points` with the same stroke layout as the input.
pub fn sketch_features_backward(strokes: &[Vec<Point>], grad: &[f64]) -> Result<Vec<Vec<Point>>> {
    if grad.len() != FEATURE_DIM {
        return Err(invalid(format!(
            "feature gradient has length {}, expected {FEATURE_DIM}",
            grad.len()
        )));
    }
    let n_points: usize = strokes.iter().map(Vec::len).sum();
    let inv_n = 1.0 / n_points.max(1) as f64;
    let occ = grid_centres(OCCUPANCY_GRID);
    let occ_w = 1.0 / OCCUPANCY_GRID as f64;
    let ori = grid_centres(ORIENTATION_GRID);
    let ori_w = 1.0 / ORIENTATION_GRID as f64;
    let o_off = OCCUPANCY_GRID * OCCUPANCY_GRID;
    let s_off = o_off + 2 * ori.len();
    let r_off = s_off + 3 * STROKE_SLOTS;
    let rough_n: usize = strokes.iter().map(|s| s.len().saturating_sub(2)).sum();
    let g_rough = if rough_n > 0 {
        grad[r_off] * ROUGHNESS_SCALE / rough_n as f64
    } else {
        0.0
    };
    let mut out: Vec<Vec<Point>> = strokes.iter().map(|s| vec![[0.0; 2]; s.len()]).collect();
    for (si, st) in strokes.iter().enumerate() {
        let slot = si % STROKE_SLOTS;
        let go = &mut out[si];
        for (pi, p) in st.iter().enumerate() {
            for (k, c) in occ.iter().enumerate() {
                let r = rbf(*p, *c, occ_w) * inv_n * grad[k];
                let s2 = occ_w * occ_w;
                go[pi][0] -= r * (p[0] - c[0]) / s2;
                go[pi][1] -= r * (p[1] - c[1]) / s2;
            }
            go[pi][0] += grad[s_off + 3 * slot] * inv_n;
            go[pi][1] += grad[s_off + 3 * slot + 1] * inv_n;
        }
        for i in 0..st.len().saturating_sub(1) {
            let (a, b) = (st[i], st[i + 1]);
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let l2 = dx * dx + dy * dy + ORIENT_EPS * ORIENT_EPS;
            let len = l2.sqrt();
            let ox = (dx * dx - dy * dy) / len;
            let oy = 2.0 * dx * dy / len;
            // d/d(dx, dy) of ox and oy
            let l3 = l2 * len;
            let dox_dx = 2.0 * dx / len - (dx * dx - dy * dy) * dx / l3;
            let dox_dy = -2.0 * dy / len - (dx * dx - dy * dy) * dy / l3;
            let doy_dx = 2.0 * dy / len - 2.0 * dx * dy * dx / l3;
            let doy_dy = 2.0 * dx / len - 2.0 * dx * dy * dy / l3;
            let mid = [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])];
            let (mut gdx, mut gdy, mut gmx, mut gmy) = (0.0, 0.0, 0.0, 0.0);
            for (k, c) in ori.iter().enumerate() {
                let m = rbf(mid, *c, ori_w);
                let (gx, gy) = (grad[o_off + 2 * k], grad[o_off + 2 * k + 1]);
                gdx += m * (gx * dox_dx + gy * doy_dx);
                gdy += m * (gx * dox_dy + gy * doy_dy);
                let up = gx * ox + gy * oy;
                let s2 = ori_w * ori_w;
                gmx -= up * m * (mid[0] - c[0]) / s2;
                gmy -= up * m * (mid[1] - c[1]) / s2;
            }
            go[i][0] += -gdx + 0.5 * gmx;
            go[i][1] += -gdy + 0.5 * gmy;
            go[i + 1][0] += gdx + 0.5 * gmx;
            go[i + 1][1] += gdy + 0.5 * gmy;
        }
        for i in 0..st.len().saturating_sub(2) {
            for d in 0..2 {
                let a = st[i + 2][d] - 2.0 * st[i + 1][d] + st[i][d];
                let g = 2.0 * a * g_rough;
                go[i][d] += g;
                go[i + 1][d] -= 2.0 * g;
                go[i + 2][d] += g;
            }
        }
    }
    Ok(out)
}

pub const RASTER_SIZE: usize = 32;

/// 32×32 binary occupancy of the drawn segments, row-major, flattened.
pub fn raster_features(strokes: &[Vec<Point>]) -> Vec<f64> {
    let n = RASTER_SIZE;
    let mut grid = vec![0.0; n * n];
    let mut mark = |p: Point| {
        let x = ((p[0].clamp(0.0, 1.0) * n as f64) as usize).min(n - 1);
        let y = ((p[1].clamp(0.0, 1.0) * n as f64) as usize).min(n - 1);
        grid[y * n + x] = 1.0;
    };
    for st in strokes {
        for w in st.windows(2) {
            let steps = ((dist(w[0], w[1]) * 2.0 * n as f64).ceil() as usize).max(1);
            for k in 0..=steps {
                let t = k as f64 / steps as f64;
                mark([
                    w[0][0] + t * (w[1][0] - w[0][0]),
                    w[0][1] + t * (w[1][1] - w[0][1]),
                ]);
            }
        }
        if st.len() == 1 {
            mark(st[0]);
        }
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, rel_err};

    #[test]
    fn zero_distortion_is_clean_shape() {
        for c in ShapeClass::ALL {
            let g = gen_sketch(c, 0.0, 99).unwrap();
            assert_eq!(g, clean_shape(c, Pose::Upright));
        }
        let counts: Vec<usize> = ShapeClass::ALL
            .iter()
            .map(|&c| clean_shape(c, Pose::Upright).stroke_count())
            .collect();
        assert_eq!(counts, vec![2, 4, 3, 5]);
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        for c in ShapeClass::ALL {
            for d in [0.1, 0.5, 1.0] {
                let a = gen_sketch(c, d, 3).unwrap();
                assert_eq!(a, gen_sketch(c, d, 3).unwrap());
                assert!(SketchSequence::new(a.strokes().to_vec()).is_ok());
            }
        }
        assert!(gen_sketch(ShapeClass::Star, 1.5, 0).is_err());
    }

    fn mean_displacement(class: ShapeClass, d: f64, seeds: u64) -> f64 {
        let clean = clean_shape(class, Pose::Upright);
        let (mut sum, mut n) = (0.0, 0usize);
        for seed in 0..seeds {
            let g = gen_sketch_traced(class, Pose::Upright, d, seed).unwrap();
            for (st, &k) in g.sketch.strokes().iter().zip(&g.kept_strokes) {
                for (p, q) in st.iter().zip(&clean.strokes()[k]) {
                    sum += dist(*p, *q);
                    n += 1;
                }
            }
        }
        sum / n as f64
    }

    #[test]
    fn displacement_grows_with_distortion() {
        for c in ShapeClass::ALL {
            let lo = mean_displacement(c, 0.1, 100);
            let hi = mean_displacement(c, 1.0, 100);
            assert!(hi >= 10.0 * lo, "{c}: {hi} vs {lo}");
            let levels: Vec<f64> = (0..=5)
                .map(|k| mean_displacement(c, k as f64 * 0.2, 100))
                .collect();
            assert!(levels.windows(2).all(|w| w[1] > w[0]), "{c}: {levels:?}");
        }
    }

    #[test]
    fn sketch_validation() {
        assert!(SketchSequence::new(vec![]).is_err());
        assert!(SketchSequence::new(vec![vec![[0.1, 0.1]]]).is_err());
        assert!(SketchSequence::new(vec![vec![[0.1, 0.1], [1.2, 0.0]]]).is_err());
        let s = SketchSequence::from_clamped(vec![vec![[-0.1, 0.5], [1.2, 0.3]]]).unwrap();
        assert_eq!(s.strokes()[0], vec![[0.0, 0.5], [1.0, 0.3]]);
        let sq = clean_shape(ShapeClass::Square, Pose::Upright);
        assert_eq!(sq.subset(&[3, 1]).unwrap().stroke_count(), 2);
        assert!(sq.subset(&[]).is_err());
        assert!(sq.subset(&[7]).is_err());
    }

    #[test]
    fn resample_spacing() {
        let s = SketchSequence::new(vec![
            vec![[0.0, 0.0], [1.0, 0.0]],
            vec![[0.0, 1.0], [0.0, 0.0]],
        ])
        .unwrap();
        let pts = resample(&s, 5).unwrap();
        assert_eq!(pts[0], [0.0, 0.0]);
        assert!((pts[1][0] - 0.5).abs() < 1e-12);
        assert!((pts[2][0] - 1.0).abs() < 1e-12 || (pts[2][1] - 1.0).abs() < 1e-12);
        assert_eq!(pts[4], [0.0, 0.0]);
    }

    #[test]
    fn features_have_fixed_length_and_differ_by_class() {
        let f: Vec<Vec<f64>> = ShapeClass::ALL
            .iter()
            .map(|&c| clean_shape(c, Pose::Upright).features())
            .collect();
        for v in &f {
            assert_eq!(v.len(), FEATURE_DIM);
        }
        assert_ne!(f[0], f[1]);
        assert_ne!(f[2], f[3]);
    }

    #[test]
    fn feature_backward_matches_finite_difference() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..10 {
            let class = ShapeClass::ALL[trial % 4];
            let sk = gen_sketch(class, 0.7, trial as u64).unwrap();
            let strokes = sk.strokes().to_vec();
            let g: Vec<f64> = (0..FEATURE_DIM)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let back = sketch_features_backward(&strokes, &g).unwrap();
            let loss = |s: &[Vec<Point>]| -> f64 {
                sketch_features(s).iter().zip(&g).map(|(a, b)| a * b).sum()
            };
            for (si, st) in strokes.iter().enumerate() {
                for pi in 0..st.len() {
                    for d in 0..2 {
                        let num = central_difference(
                            |x| {
                                let mut s = strokes.clone();
                                s[si][pi][d] = x;
                                loss(&s)
                            },
                            st[pi][d],
                            1e-5,
                        );
                        let e = rel_err(back[si][pi][d], num, 1e-6);
                        assert!(e < 1e-6, "{class} stroke {si} point {pi}: {e}");
                    }
                }
            }
        }
        assert!(sketch_features_backward(&[], &[0.0]).is_err());
    }

    #[test]
    fn raster_marks_segment_cells() {
        let r = raster_features(&[vec![[0.0, 0.0], [1.0, 0.0]]]);
        assert_eq!(r.len(), RASTER_SIZE * RASTER_SIZE);
        assert_eq!(r[..RASTER_SIZE].iter().sum::<f64>(), RASTER_SIZE as f64);
        assert_eq!(r.iter().sum::<f64>(), RASTER_SIZE as f64);
    }

    #[test]
    fn shape_class_parsing() {
        assert_eq!("star".parse::<ShapeClass>().unwrap(), ShapeClass::Star);
        assert!("hexagon".parse::<ShapeClass>().is_err());
        assert_eq!(ShapeClass::from_index(2).unwrap(), ShapeClass::Triangle);
        assert!(ShapeClass::from_index(4).is_err());
    }
}
