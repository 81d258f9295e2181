//! Synthetic datasets: 9-Gaussian toys, distortion-controlled sketch corpora,
//! label noise, k-means pseudo-labels and rating discretisation, plus the
//! line-delimited JSON / CSV file formats.

use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::engine::Matrix;
use crate::error::{config, invalid, Error, Result};
use crate::sketch::{gen_sketch_traced, Pose, ShapeClass, SketchSequence, FEATURE_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arrangement {
    Circle,
    Grid,
}

impl fmt::Display for Arrangement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arrangement::Circle => "circle",
            Arrangement::Grid => "grid",
        })
    }
}

impl FromStr for Arrangement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "circle" => Ok(Arrangement::Circle),
            "grid" => Ok(Arrangement::Grid),
            _ => Err(config(format!("unknown arrangement '{s}' (circle|grid)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureSpec {
    pub arrangement: Arrangement,
    pub components: usize,
    pub sigma: f64,
    pub samples_per_component: usize,
    pub seed: u64,
}

impl GaussianMixtureSpec {
    pub fn nine(arrangement: Arrangement, samples_per_component: usize, seed: u64) -> Self {
        Self {
            arrangement,
            components: 9,
            sigma: 0.05,
            samples_per_component,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(config("sigma must be finite and non-negative"));
        }
        if self.components < 2 || self.samples_per_component == 0 {
            return Err(config("need ≥2 components and ≥1 sample per component"));
        }
        if self.arrangement == Arrangement::Grid {
            let side = (self.components as f64).sqrt().round() as usize;
            if side * side != self.components {
                return Err(config("grid arrangement needs a square component count"));
            }
        }
        Ok(())
    }

    /// Circle: unit circle at angles 2πk/K. Grid: equally spaced lattice on [−1, 1]².
    pub fn centres(&self) -> Vec<[f64; 2]> {
        match self.arrangement {
            Arrangement::Circle => (0..self.components)
                .map(|k| {
                    let a = 2.0 * PI * k as f64 / self.components as f64;
                    [a.cos(), a.sin()]
                })
                .collect(),
            Arrangement::Grid => {
                let side = (self.components as f64).sqrt().round() as usize;
                let step = 2.0 / (side - 1).max(1) as f64;
                let mut c = Vec::with_capacity(self.components);
                for i in 0..side {
                    for j in 0..side {
                        c.push([-1.0 + j as f64 * step, -1.0 + i as f64 * step]);
                    }
                }
                c
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Samples {
    Points(Matrix),
    Sketches(Vec<SketchSequence>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSet {
    pub samples: Samples,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub truth_labels: Option<Vec<usize>>,
    pub distortion: Option<Vec<f64>>,
    pub pose: Option<Vec<Pose>>,
}

impl LabeledSet {
    pub fn new(samples: Samples, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let set = Self {
            samples,
            labels,
            class_count,
            truth_labels: None,
            distortion: None,
            pose: None,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = match &self.samples {
            Samples::Points(m) => m.rows(),
            Samples::Sketches(s) => s.len(),
        };
        if n != self.labels.len() {
            return Err(invalid(format!(
                "{n} samples but {} labels",
                self.labels.len()
            )));
        }
        if self.class_count == 0 || self.labels.iter().any(|&y| y >= self.class_count) {
            return Err(invalid("labels must lie in [0, class_count)"));
        }
        let lens = [
            self.truth_labels.as_ref().map(Vec::len),
            self.distortion.as_ref().map(Vec::len),
            self.pose.as_ref().map(Vec::len),
        ];
        if lens.iter().flatten().any(|&l| l != n) {
            return Err(invalid("metadata length differs from sample count"));
        }
        Ok(())
    }

    /// Model inputs: the points themselves, or the sketch feature map.
    pub fn inputs(&self) -> Matrix {
        match &self.samples {
            Samples::Points(m) => m.clone(),
            Samples::Sketches(s) => {
                let mut m = Matrix::zeros(s.len(), FEATURE_DIM);
                for (i, sk) in s.iter().enumerate() {
                    m.row_mut(i).copy_from_slice(&sk.features());
                }
                m
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        match &self.samples {
            Samples::Points(m) => m.cols(),
            Samples::Sketches(_) => FEATURE_DIM,
        }
    }

    pub fn sketches(&self) -> Option<&[SketchSequence]> {
        match &self.samples {
            Samples::Sketches(s) => Some(s),
            Samples::Points(_) => None,
        }
    }

    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        let mut out = self.clone();
        out.labels = labels;
        out.validate()?;
        Ok(out)
    }
}

pub fn gen_gaussians(spec: &GaussianMixtureSpec) -> Result<LabeledSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centres = spec.centres();
    let n = spec.components * spec.samples_per_component;
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for (k, c) in centres.iter().enumerate() {
        for _ in 0..spec.samples_per_component {
            let gx: f64 = rng.sample(StandardNormal);
            let gy: f64 = rng.sample(StandardNormal);
            data.push(c[0] + spec.sigma * gx);
            data.push(c[1] + spec.sigma * gy);
            labels.push(k);
        }
    }
    let mut set = LabeledSet::new(
        Samples::Points(Matrix::from_vec(n, 2, data)?),
        labels,
        spec.components,
    )?;
    set.truth_labels = Some(set.labels.clone());
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SketchCorpusSpec {
    pub per_class: usize,
    /// Distortion drawn uniformly from this range, or cycled through `levels` when set.
    pub distortion_range: (f64, f64),
    pub levels: Option<Vec<f64>>,
    /// Probability that a sample is drawn in the turned sub-style; 0 keeps every sample upright.
    pub turned_share: f64,
    pub seed: u64,
}

impl SketchCorpusSpec {
    pub fn uniform(per_class: usize, seed: u64) -> Self {
        Self {
            per_class,
            distortion_range: (0.0, 1.0),
            levels: None,
            turned_share: 0.0,
            seed,
        }
    }
}

/// All four shape classes, `per_class` samples each, interleaved by class.
pub fn gen_sketch_corpus(spec: &SketchCorpusSpec) -> Result<LabeledSet> {
    let (lo, hi) = spec.distortion_range;
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(config("distortion range must satisfy 0 ≤ lo ≤ hi ≤ 1"));
    }
    if !(0.0..=1.0).contains(&spec.turned_share) {
        return Err(config("turned_share must lie in [0, 1]"));
    }
    if spec.per_class == 0 {
        return Err(config("corpus needs at least one sample per class"));
    }
    if let Some(l) = &spec.levels {
        if l.is_empty() || l.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return Err(config(
                "distortion levels must be non-empty and within [0, 1]",
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut sketches = Vec::new();
    let mut labels = Vec::new();
    let mut distortion = Vec::new();
    let mut poses = Vec::new();
    for i in 0..spec.per_class {
        for class in ShapeClass::ALL {
            let d = match &spec.levels {
                Some(l) => l[i % l.len()],
                None if hi > lo => rng.random_range(lo..=hi),
                None => lo,
            };
            let pose = if spec.turned_share > 0.0 && rng.random_bool(spec.turned_share) {
                Pose::Turned
            } else {
                Pose::Upright
            };
            let seed = rng.random::<u64>();
            sketches.push(gen_sketch_traced(class, pose, d, seed)?.sketch);
            labels.push(class.index());
            distortion.push(d);
            poses.push(pose);
        }
    }
    let mut set = LabeledSet::new(Samples::Sketches(sketches), labels, ShapeClass::ALL.len())?;
    set.truth_labels = Some(set.labels.clone());
    set.distortion = Some(distortion);
    set.pose = Some(poses);
    Ok(set)
}

/// Each label is replaced, with probability `rate`, by a uniformly chosen
/// different class. The original labels are kept as `truth_labels`.
pub fn inject_label_noise(set: &LabeledSet, rate: f64, seed: u64) -> Result<LabeledSet> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(invalid(format!(
            "noise rate must lie in [0, 1], got {rate}"
        )));
    }
    if set.class_count < 2 {
        return Err(invalid("label noise needs at least two classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = set
        .truth_labels
        .clone()
        .unwrap_or_else(|| set.labels.clone());
    let labels = set
        .labels
        .iter()
        .map(|&y| {
            if rng.random_bool(rate) {
                let k = rng.random_range(0..set.class_count - 1);
                if k >= y {
                    k + 1
                } else {
                    k
                }
            } else {
                y
            }
        })
        .collect();
    let mut out = set.with_labels(labels)?;
    out.truth_labels = Some(truth);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub labels: Vec<usize>,
    pub centres: Matrix,
    pub inertia: f64,
}

pub const KMEANS_MAX_ITERS: usize = 100;
pub const KMEANS_RESTARTS: usize = 5;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centres: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for k in 0..centres.rows() {
        let d = sq_dist(x, centres.row(k));
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Lloyd iterations from the given centres. Empty clusters are reseeded with
/// the point farthest from its current centre.
fn lloyd(features: &Matrix, mut centres: Matrix) -> Clustering {
    let (n, dim) = (features.rows(), features.cols());
    let k = centres.rows();
    let mut labels = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        let mut dists = vec![0.0; n];
        for i in 0..n {
            let (c, d) = nearest(features.row(i), &centres);
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
            dists[i] = d;
        }
        let mut counts = vec![0usize; k];
        let mut sums = Matrix::zeros(k, dim);
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, x) in sums.row_mut(labels[i]).iter_mut().zip(features.row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]))
                    .unwrap_or(0);
                centres.row_mut(c).copy_from_slice(features.row(far));
                dists[far] = 0.0;
                labels[far] = c;
                changed = true;
            } else {
                for (dst, s) in centres.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut inertia = 0.0;
    for i in 0..n {
        let (c, d) = nearest(features.row(i), &centres);
        labels[i] = c;
        inertia += d;
    }
    Clustering {
        labels,
        centres,
        inertia,
    }
}

fn kmeanspp_init(features: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = features.rows();
    let mut centres = Matrix::zeros(k, features.cols());
    let first = rng.random_range(0..n);
    centres.row_mut(0).copy_from_slice(features.row(first));
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(features.row(i), features.row(first)))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    idx = i;
                    break;
                }
                r -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centres.row_mut(c).copy_from_slice(features.row(pick));
        for i in 0..n {
            d2[i] = d2[i].min(sq_dist(features.row(i), features.row(pick)));
        }
    }
    centres
}

/// k-means pseudo-labels. With `prev_centres` the alternation is warm-started
/// from them (keeping cluster identities stable across refreshes); otherwise
/// the best of several k-means++ restarts is returned.
pub fn pseudo_label(
    features: &Matrix,
    k: usize,
    prev_centres: Option<&Matrix>,
    seed: u64,
) -> Result<Clustering> {
    if k < 2 {
        return Err(invalid("pseudo-labelling needs K ≥ 2"));
    }
    if features.rows() < k {
        return Err(invalid(format!(
            "{} samples cannot form {k} clusters",
            features.rows()
        )));
    }
    if !features.all_finite() {
        return Err(invalid("features must be finite"));
    }
    if let Some(c) = prev_centres {
        if c.rows() != k || c.cols() != features.cols() {
            return Err(invalid("previous centres have the wrong shape"));
        }
        return Ok(lloyd(features, c.clone()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<Clustering> = None;
    for _ in 0..KMEANS_RESTARTS {
        let init = kmeanspp_init(features, k, &mut rng);
        let c = lloyd(features, init);
        if best.as_ref().is_none_or(|b| c.inertia < b.inertia) {
            best = Some(c);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BinPolicy {
    #[default]
    EqualWidth,
    EqualFrequency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingBins {
    pub labels: Vec<usize>,
    /// `N + 1` ascending edges; bin `k` is `[edges[k], edges[k+1])`, the last bin closed.
    pub edges: Vec<f64>,
}

impl RatingBins {
    /// Centre of bin `k`, for mapping class predictions back to scores.
    pub fn centre(&self, k: usize) -> Option<f64> {
        (k + 1 < self.edges.len()).then(|| 0.5 * (self.edges[k] + self.edges[k + 1]))
    }
}

pub fn bin_ratings(ratings: &[f64], n: usize, policy: BinPolicy) -> Result<RatingBins> {
    if n < 2 {
        return Err(invalid("need at least two rating bins"));
    }
    if ratings.is_empty() || ratings.iter().any(|r| !r.is_finite()) {
        return Err(invalid("ratings must be non-empty and finite"));
    }
    let lo = ratings.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ratings.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(invalid("ratings have zero range; bins would be degenerate"));
    }
    let edges: Vec<f64> = match policy {
        BinPolicy::EqualWidth => (0..=n)
            .map(|k| lo + (hi - lo) * k as f64 / n as f64)
            .collect(),
        BinPolicy::EqualFrequency => {
            let mut sorted = ratings.to_vec();
            sorted.sort_by(f64::total_cmp);
            let m = sorted.len();
            let mut e: Vec<f64> = (0..=n)
                .map(|k| {
                    let pos = (k as f64 / n as f64) * (m - 1) as f64;
                    let (i, t) = (pos.floor() as usize, pos.fract());
                    sorted[i] + t * (sorted[(i + 1).min(m - 1)] - sorted[i])
                })
                .collect();
            e[0] = lo;
            e[n] = hi;
            e
        }
    };
    let labels = ratings
        .iter()
        .map(|&r| {
            let k = edges[1..n].iter().filter(|&&e| r >= e).count();
            k.min(n - 1)
        })
        .collect();
    Ok(RatingBins { labels, edges })
}

/// One line of the sketch dataset format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SketchRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub strokes: Vec<Vec<[f64; 2]>>,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distortion: Option<f64>,
}

/// One line of the point dataset format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub x: Vec<f64>,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<usize>,
}

pub fn write_jsonl<W: Write>(set: &LabeledSet, mut w: W) -> Result<()> {
    match &set.samples {
        Samples::Sketches(s) => {
            for (i, sk) in s.iter().enumerate() {
                let rec = SketchRecord {
                    id: Some(i.to_string()),
                    strokes: sk.strokes().to_vec(),
                    label: set.labels[i],
                    distortion: set.distortion.as_ref().map(|d| d[i]),
                };
                serde_json::to_writer(&mut w, &rec)?;
                w.write_all(b"\n")?;
            }
        }
        Samples::Points(m) => {
            for i in 0..m.rows() {
                let rec = PointRecord {
                    x: m.row(i).to_vec(),
                    label: set.labels[i],
                    truth: set.truth_labels.as_ref().map(|t| t[i]),
                };
                serde_json::to_writer(&mut w, &rec)?;
                w.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}

/// Reads either format; the kind is detected from the first non-empty line.
/// `class_count` defaults to `max(label) + 1`. Returns the per-line ids too.
pub fn read_jsonl<R: BufRead>(
    r: R,
    class_count: Option<usize>,
) -> Result<(LabeledSet, Vec<String>)> {
    let mut sketches = Vec::new();
    let mut points: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut truth = Vec::new();
    let mut distortion = Vec::new();
    let mut ids = Vec::new();
    for (ln, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {e}", ln + 1)))?;
        if value.get("strokes").is_some() {
            if !points.is_empty() {
                return Err(Error::Format(format!(
                    "line {}: mixed record kinds",
                    ln + 1
                )));
            }
            let rec: SketchRecord = serde_json::from_value(value)
                .map_err(|e| Error::Format(format!("line {}: {e}", ln + 1)))?;
            ids.push(rec.id.clone().unwrap_or_else(|| sketches.len().to_string()));
            sketches.push(
                SketchSequence::new(rec.strokes)
                    .map_err(|e| Error::Format(format!("line {}: {e}", ln + 1)))?,
            );
            labels.push(rec.label);
            distortion.push(rec.distortion);
        } else {
            if !sketches.is_empty() {
                return Err(Error::Format(format!(
                    "line {}: mixed record kinds",
                    ln + 1
                )));
            }
            let rec: PointRecord = serde_json::from_value(value)
                .map_err(|e| Error::Format(format!("line {}: {e}", ln + 1)))?;
            if let Some(first) = points.first() {
                if first.len() != rec.x.len() {
                    return Err(Error::Format(format!(
                        "line {}: dimension mismatch",
                        ln + 1
                    )));
                }
            }
            ids.push(points.len().to_string());
            points.push(rec.x);
            labels.push(rec.label);
            truth.push(rec.truth);
        }
    }
    if labels.is_empty() {
        return Err(Error::Format("dataset is empty".into()));
    }
    let c = class_count.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let mut set = if !sketches.is_empty() {
        let mut s = LabeledSet::new(Samples::Sketches(sketches), labels, c)?;
        if distortion.iter().all(Option::is_some) {
            s.distortion = Some(distortion.into_iter().flatten().collect());
        }
        s
    } else {
        let dim = points[0].len();
        let n = points.len();
        let m = Matrix::from_vec(n, dim, points.into_iter().flatten().collect())?;
        LabeledSet::new(Samples::Points(m), labels, c)?
    };
    if !truth.is_empty() && truth.iter().all(Option::is_some) {
        set.truth_labels = Some(truth.into_iter().flatten().collect());
    }
    set.validate()?;
    Ok((set, ids))
}

/// Parses `id,score` rows; a header row whose score column is not numeric is skipped.
pub fn read_ratings_csv<R: BufRead>(r: R) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (ln, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (id, score) = line
            .split_once(',')
            .ok_or_else(|| Error::Format(format!("line {}: expected id,score", ln + 1)))?;
        match score.trim().parse::<f64>() {
            Ok(v) => out.push((id.trim().to_string(), v)),
            Err(_) if ln == 0 => continue,
            Err(_) => {
                return Err(Error::Format(format!(
                    "line {}: bad score '{score}'",
                    ln + 1
                )))
            }
        }
    }
    Ok(out)
}

/// Shuffled index order for one epoch.
pub fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
