//! Downstream uses of a quality score: ranking, pairwise comparison, label
//! cleansing, stroke attribution and two perceptual-bias metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::Matrix;
use crate::error::{config, invalid, Error, Result};
use crate::sketch::{clean_shape, Point, Pose, ShapeClass, SketchSequence};
use crate::stats::pearson;
use crate::trainer::TrainedModel;

/// Anything that maps a sketch to a normalised quality.
pub trait SketchScorer {
    fn score_sketch(&self, sketch: &SketchSequence) -> Result<f64>;
}

impl SketchScorer for TrainedModel {
    fn score_sketch(&self, sketch: &SketchSequence) -> Result<f64> {
        let f = sketch.features();
        let x = Matrix::from_vec(1, f.len(), f)?;
        Ok(self.score(&x)?[0])
    }
}

/// Indices ordered by descending score; equal scores keep input order.
pub fn rank(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Better {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairVerdict {
    pub better: Better,
    /// Set when both scores are equal; `better` is then `A`.
    pub tie: bool,
    pub q_a: f64,
    pub q_b: f64,
}

pub fn pair_compare(q_a: f64, q_b: f64) -> PairVerdict {
    PairVerdict {
        better: if q_b > q_a { Better::B } else { Better::A },
        tie: q_a == q_b,
        q_a,
        q_b,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CleanseVerdict {
    Clean,
    NoisyLabel,
    TooBad,
}

impl CleanseVerdict {
    pub fn name(self) -> &'static str {
        match self {
            CleanseVerdict::Clean => "clean",
            CleanseVerdict::NoisyLabel => "noisy_label",
            CleanseVerdict::TooBad => "too_bad",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CleanseThresholds {
    pub q_hi: f64,
    pub theta_hi: f64,
    pub q_lo: f64,
}

impl Default for CleanseThresholds {
    fn default() -> Self {
        Self {
            q_hi: 0.4,
            theta_hi: 1.5,
            q_lo: 0.1,
        }
    }
}

impl CleanseThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.q_lo <= self.q_hi) || !self.theta_hi.is_finite() {
            return Err(config("cleanse thresholds need q_lo ≤ q_hi and a finite θ_hi"));
        }
        Ok(())
    }

    pub fn verdict(&self, q_norm: f64, theta: f64) -> CleanseVerdict {
        if q_norm > self.q_hi && theta > self.theta_hi {
            CleanseVerdict::NoisyLabel
        } else if q_norm < self.q_lo {
            CleanseVerdict::TooBad
        } else {
            CleanseVerdict::Clean
        }
    }
}

/// Verdict per `(q_norm, θ)` pair.
pub fn cleanse(scored: &[(f64, f64)], th: &CleanseThresholds) -> Result<Vec<CleanseVerdict>> {
    th.validate()?;
    Ok(scored.iter().map(|&(q, t)| th.verdict(q, t)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub q_hi: f64,
    pub theta_hi: f64,
    pub flagged: usize,
    /// `None` when nothing is flagged.
    pub precision: Option<f64>,
    pub recall: f64,
}

/// Precision and recall of the noisy-label flag against known corrupted
/// samples, for every `(q_hi, θ_hi)` combination.
pub fn cleanse_pr_sweep(
    scored: &[(f64, f64)],
    is_noisy: &[bool],
    q_his: &[f64],
    theta_his: &[f64],
) -> Result<Vec<PrPoint>> {
    if scored.len() != is_noisy.len() {
        return Err(invalid("scores and noise flags differ in length"));
    }
    let positives = is_noisy.iter().filter(|&&b| b).count();
    if positives == 0 {
        return Err(Error::Domain("no corrupted samples to recall".into()));
    }
    let mut out = Vec::with_capacity(q_his.len() * theta_his.len());
    for &q_hi in q_his {
        for &theta_hi in theta_his {
            let (mut flagged, mut hits) = (0, 0);
            for (&(q, t), &noisy) in scored.iter().zip(is_noisy) {
                if q > q_hi && t > theta_hi {
                    flagged += 1;
                    hits += noisy as usize;
                }
            }
            out.push(PrPoint {
                q_hi,
                theta_hi,
                flagged,
                precision: (flagged > 0).then(|| hits as f64 / flagged as f64),
                recall: hits as f64 / positives as f64,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeParams {
    pub q_tau: f64,
    pub q_max: f64,
    /// Smallest quality gain that justifies removing a stroke.
    pub delta: f64,
}

impl Default for AttributeParams {
    fn default() -> Self {
        Self {
            q_tau: 0.4,
            q_max: 0.7,
            delta: 0.05,
        }
    }
}

impl AttributeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.q_tau < self.q_max) || !(self.delta >= 0.0) {
            return Err(config("attribution needs q_tau < q_max and delta ≥ 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionVerdict {
    Benign,
    /// Rare and hard sketch: poor overall, but some stroke subset scores high.
    Rhs,
    Malicious,
}

impl AttributionVerdict {
    pub fn name(self) -> &'static str {
        match self {
            AttributionVerdict::Benign => "benign",
            AttributionVerdict::Rhs => "rhs",
            AttributionVerdict::Malicious => "malicious",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub verdict: AttributionVerdict,
    pub q_full: f64,
    /// Best quality seen along the search and the strokes (indices into the
    /// input) that achieve it.
    pub best_q: f64,
    pub best_strokes: Vec<usize>,
    /// Removed stroke indices in removal order, with the quality after each.
    pub removals: Vec<(usize, f64)>,
    pub scorer_calls: usize,
}

/// Greedy stroke removal. A sketch scoring at least `q_tau` is benign.
/// Otherwise the stroke whose removal raises the score most is dropped while
/// that gain is at least `delta` and more than one stroke remains; the sketch
/// is RHS if any accepted state reaches `q_max`. Uses at most S² scorer calls.
pub fn attribute<S: SketchScorer + ?Sized>(
    sketch: &SketchSequence,
    scorer: &S,
    params: &AttributeParams,
) -> Result<Attribution> {
    params.validate()?;
    let n = sketch.stroke_count();
    if n == 0 {
        return Err(invalid("cannot attribute an empty sketch"));
    }
    let q_full = scorer.score_sketch(sketch)?;
    let mut calls = 1;
    let mut current: Vec<usize> = (0..n).collect();
    let mut out = Attribution {
        verdict: AttributionVerdict::Benign,
        q_full,
        best_q: q_full,
        best_strokes: current.clone(),
        removals: Vec::new(),
        scorer_calls: 0,
    };
    if q_full >= params.q_tau {
        out.scorer_calls = calls;
        return Ok(out);
    }
    let mut q_cur = q_full;
    while current.len() > 1 {
        let mut best: Option<(usize, f64)> = None;
        for pos in 0..current.len() {
            let keep: Vec<usize> = current
                .iter()
                .enumerate()
                .filter(|&(p, _)| p != pos)
                .map(|(_, &s)| s)
                .collect();
            let q = scorer.score_sketch(&sketch.subset(&keep)?)?;
            calls += 1;
            if best.is_none_or(|(_, bq)| q > bq) {
                best = Some((pos, q));
            }
        }
        let (pos, q) = best.expect("at least two strokes remain");
        if q - q_cur < params.delta {
            break;
        }
        let removed = current.remove(pos);
        out.removals.push((removed, q));
        q_cur = q;
        if q > out.best_q {
            out.best_q = q;
            out.best_strokes = current.clone();
        }
    }
    out.verdict = if out.best_q >= params.q_max {
        AttributionVerdict::Rhs
    } else {
        AttributionVerdict::Malicious
    };
    out.scorer_calls = calls;
    Ok(out)
}

/// Reference verdict by scoring every non-empty stroke subset: benign when
/// the full sketch reaches `q_tau`, RHS when any subset reaches `q_max`.
/// Returns the verdict, the best subset score and that subset. Limited to 16
/// strokes.
pub fn exhaustive_verdict<S: SketchScorer + ?Sized>(
    sketch: &SketchSequence,
    scorer: &S,
    params: &AttributeParams,
) -> Result<(AttributionVerdict, f64, Vec<usize>)> {
    params.validate()?;
    let n = sketch.stroke_count();
    if n == 0 || n > 16 {
        return Err(invalid("exhaustive attribution needs 1 to 16 strokes"));
    }
    let all: Vec<usize> = (0..n).collect();
    let q_full = scorer.score_sketch(sketch)?;
    if q_full >= params.q_tau {
        return Ok((AttributionVerdict::Benign, q_full, all));
    }
    let (mut best_q, mut best) = (q_full, all);
    for mask in 1u32..(1 << n) {
        let keep: Vec<usize> = (0..n).filter(|&i| mask & (1 << i) != 0).collect();
        let q = scorer.score_sketch(&sketch.subset(&keep)?)?;
        if q > best_q {
            best_q = q;
            best = keep;
        }
    }
    let verdict = if best_q >= params.q_max {
        AttributionVerdict::Rhs
    } else {
        AttributionVerdict::Malicious
    };
    Ok((verdict, best_q, best))
}

/// Scores a sketch by how well its strokes match the clean strokes of one
/// class: `coverage · 0.85^k`, where coverage is the fraction of template
/// strokes matched by some drawn stroke and `k` counts drawn strokes that
/// match nothing. A stroke matches when its symmetric mean point distance to
/// a template stroke is below `tolerance`.
#[derive(Debug, Clone)]
pub struct TemplateScorer {
    template: Vec<Vec<Point>>,
    pub tolerance: f64,
}

pub const TEMPLATE_STRAY_FACTOR: f64 = 0.85;

impl TemplateScorer {
    pub fn new(class: ShapeClass, pose: Pose) -> Self {
        Self {
            template: clean_shape(class, pose).strokes().to_vec(),
            tolerance: 0.05,
        }
    }

    fn matches(&self, stroke: &[Point]) -> Vec<usize> {
        (0..self.template.len())
            .filter(|&j| chamfer(stroke, &self.template[j]) < self.tolerance)
            .collect()
    }
}

impl SketchScorer for TemplateScorer {
    fn score_sketch(&self, sketch: &SketchSequence) -> Result<f64> {
        let mut covered = vec![false; self.template.len()];
        let mut stray = 0;
        for st in sketch.strokes() {
            let m = self.matches(st);
            if m.is_empty() {
                stray += 1;
            }
            for j in m {
                covered[j] = true;
            }
        }
        let coverage = covered.iter().filter(|&&c| c).count() as f64 / covered.len() as f64;
        Ok(coverage * TEMPLATE_STRAY_FACTOR.powi(stray))
    }
}

fn chamfer(a: &[Point], b: &[Point]) -> f64 {
    fn one_way(a: &[Point], b: &[Point]) -> f64 {
        a.iter()
            .map(|p| {
                b.iter()
                    .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / a.len() as f64
    }
    0.5 * (one_way(a, b) + one_way(b, a))
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_features(scores: &[f64], features: &[Vec<f64>]) -> Result<()> {
    if scores.len() != features.len() {
        return Err(invalid("scores and features differ in length"));
    }
    if let Some(f) = features.first() {
        if features.iter().any(|g| g.len() != f.len()) {
            return Err(invalid("feature vectors differ in length"));
        }
    }
    Ok(())
}

/// Pearson correlation between score gaps `|q_i − q_j|` and feature
/// distances `‖x_i − x_j‖` over sample pairs. `pairs = 0`, or at least the
/// number of distinct pairs, uses every pair `i < j`; otherwise that many
/// pairs `i ≠ j` are drawn uniformly with replacement.
pub fn pcc_metric(scores: &[f64], features: &[Vec<f64>], pairs: usize, seed: u64) -> Result<f64> {
    check_features(scores, features)?;
    let n = scores.len();
    if n < 2 {
        return Err(invalid("pcc needs at least two samples"));
    }
    let total = n * (n - 1) / 2;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    let mut push = |i: usize, j: usize| {
        xs.push((scores[i] - scores[j]).abs());
        ys.push(euclid(&features[i], &features[j]));
    };
    if pairs == 0 || pairs >= total {
        for i in 0..n {
            for j in i + 1..n {
                push(i, j);
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..pairs {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            push(i, j);
        }
    }
    pearson(&xs, &ys)
}

/// Mean within-basket pairwise feature distance, averaged over baskets.
/// Scores (clamped to `[0, 1]`) fall into `buckets` equal-width baskets;
/// baskets with fewer than two samples are skipped. This is a mean distance,
/// not a variance.
pub fn diversity_metric(scores: &[f64], features: &[Vec<f64>], buckets: usize) -> Result<f64> {
    check_features(scores, features)?;
    if buckets == 0 {
        return Err(config("diversity needs at least one basket"));
    }
    let mut baskets: Vec<Vec<usize>> = vec![Vec::new(); buckets];
    for (i, &q) in scores.iter().enumerate() {
        if !q.is_finite() {
            return Err(invalid("scores must be finite"));
        }
        let b = ((q.clamp(0.0, 1.0) * buckets as f64) as usize).min(buckets - 1);
        baskets[b].push(i);
    }
    let mut per_basket = Vec::new();
    for members in baskets.iter().filter(|m| m.len() >= 2) {
        let (mut sum, mut count) = (0.0, 0usize);
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                sum += euclid(&features[i], &features[j]);
                count += 1;
            }
        }
        per_basket.push(sum / count as f64);
    }
    if per_basket.is_empty() {
        return Err(Error::Domain("no basket holds two or more samples".into()));
    }
    Ok(per_basket.iter().sum::<f64>() / per_basket.len() as f64)
}

/// Applies `metric` to each class separately and averages the results,
/// skipping classes with fewer than two samples.
pub fn per_class_mean<F>(
    scores: &[f64],
    features: &[Vec<f64>],
    labels: &[usize],
    mut metric: F,
) -> Result<f64>
where
    F: FnMut(&[f64], &[Vec<f64>]) -> Result<f64>,
{
    check_features(scores, features)?;
    if labels.len() != scores.len() {
        return Err(invalid("labels and scores differ in length"));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut vals = Vec::new();
    for c in 0..classes {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.len() < 2 {
            continue;
        }
        let q: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let f: Vec<Vec<f64>> = idx.iter().map(|&i| features[i].clone()).collect();
        vals.push(metric(&q, &f)?);
    }
    if vals.is_empty() {
        return Err(Error::Domain("no class holds two or more samples".into()));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}
