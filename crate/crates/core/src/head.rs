//! The geometry-aware classification head.
//!
//! The target logit of a normalised-softmax layer, `s·cosθ_y`, is replaced by a
//! compound function `A(q, θ_y)` of the (scaled) feature magnitude `q` and the
//! angle to the true-class prototype. Non-target logits stay `s·cosθ_j`, and a
//! score regulariser `λ_g·G(q)` with `G(q) = 1/q + q/u_q²` confines `q` to the
//! working range `[l_q, u_q]`.
//!
//! All exponentials are evaluated in log space: the per-sample loss is
//! `softplus(log R − A)`, never `−log(e^A / (e^A + R))` directly.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binning::BinningSpec;
use crate::engine::{dot, norm, Matrix};
use crate::error::{config, invalid, Error, Result};

/// Cosines are clamped to this band before `acos`.
pub const COS_CLAMP: f64 = 1.0 - 1e-7;

/// Default multiple of [`lambda_bound`] used for `λ_g`.
pub const LAMBDA_MARGIN: f64 = 1.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Instantiation {
    /// `A = (1 − q)·s·cosθ`
    Scale,
    /// `A = s·cos(qθ)`
    #[serde(rename = "mul")]
    MulAngular,
    /// `A = s·cos(θ + q)`
    #[serde(rename = "add")]
    AddAngular,
    /// `A = s·cosθ − q`
    #[serde(rename = "cos")]
    Cosine,
}

impl Instantiation {
    pub const ALL: [Instantiation; 4] = [
        Instantiation::Scale,
        Instantiation::MulAngular,
        Instantiation::AddAngular,
        Instantiation::Cosine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Instantiation::Scale => "scale",
            Instantiation::MulAngular => "mul",
            Instantiation::AddAngular => "add",
            Instantiation::Cosine => "cos",
        }
    }

    /// Working range `(l_q, u_q)` and scale `s` of the published presets.
    pub fn preset_range(self) -> (f64, f64, f64) {
        match self {
            Instantiation::Scale => (0.1, 0.3, 64.0),
            Instantiation::MulAngular => (1.1, 1.25, 64.0),
            Instantiation::AddAngular => (0.45, 0.65, 64.0),
            Instantiation::Cosine => (0.35, 0.8, 64.0),
        }
    }

    /// Whether the angle enters `A` through `acos` (and is clipped at π/2).
    fn is_angular(self) -> bool {
        matches!(self, Instantiation::MulAngular | Instantiation::AddAngular)
    }
}

impl fmt::Display for Instantiation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Instantiation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "scale" | "sca" => Ok(Instantiation::Scale),
            "mul" | "mul_angular" | "multiplicative" => Ok(Instantiation::MulAngular),
            "add" | "add_angular" | "additive" => Ok(Instantiation::AddAngular),
            "cos" | "cosine" => Ok(Instantiation::Cosine),
            other => Err(config(format!("unknown instantiation '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub instantiation: Instantiation,
    pub s: f64,
    pub l_q: f64,
    pub u_q: f64,
    pub lambda_g: f64,
    pub class_count: usize,
    pub feature_dim: usize,
}

impl HeadConfig {
    pub fn new(
        instantiation: Instantiation,
        s: f64,
        l_q: f64,
        u_q: f64,
        lambda_g: f64,
        class_count: usize,
        feature_dim: usize,
    ) -> Result<Self> {
        let cfg = Self {
            instantiation,
            s,
            l_q,
            u_q,
            lambda_g,
            class_count,
            feature_dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// One of the four published settings with `λ_g = 1.05 × lambda_bound`.
    pub fn preset(instantiation: Instantiation, class_count: usize, feature_dim: usize) -> Self {
        let (l_q, u_q, s) = instantiation.preset_range();
        let bound = lambda_bound(instantiation, s, l_q, u_q).expect("preset ranges are valid");
        Self {
            instantiation,
            s,
            l_q,
            u_q,
            lambda_g: LAMBDA_MARGIN * bound,
            class_count,
            feature_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0) || !self.s.is_finite() {
            return Err(config(format!("s must be positive, got {}", self.s)));
        }
        if !(self.l_q > 0.0) || !(self.l_q < self.u_q) || !self.u_q.is_finite() {
            return Err(config(format!(
                "working range must satisfy 0 < l_q < u_q, got [{}, {}]",
                self.l_q, self.u_q
            )));
        }
        if self.class_count < 2 {
            return Err(config("class_count must be at least 2"));
        }
        if self.feature_dim == 0 {
            return Err(config("feature_dim must be positive"));
        }
        let bound = lambda_bound(self.instantiation, self.s, self.l_q, self.u_q)?;
        if !(self.lambda_g > bound) {
            return Err(config(format!(
                "lambda_g = {} must exceed the {} bound {bound}",
                self.lambda_g, self.instantiation
            )));
        }
        Ok(())
    }

    pub fn lambda_bound(&self) -> f64 {
        lambda_bound(self.instantiation, self.s, self.l_q, self.u_q).unwrap_or(f64::INFINITY)
    }

    /// `(q − l_q)/(u_q − l_q)` clamped to `[0, 1]`.
    pub fn normalize_q(&self, q: f64) -> f64 {
        ((q - self.l_q) / (self.u_q - self.l_q)).clamp(0.0, 1.0)
    }
}

/// Smallest admissible `λ_g` for which `∇_q L(l_q, θ) < 0` is guaranteed.
pub fn lambda_bound(inst: Instantiation, s: f64, l_q: f64, u_q: f64) -> Result<f64> {
    if !(l_q > 0.0 && l_q < u_q) {
        return Err(config(format!(
            "working range must satisfy 0 < l_q < u_q, got [{l_q}, {u_q}]"
        )));
    }
    let (l2, u2) = (l_q * l_q, u_q * u_q);
    let base = l2 * u2 / (u2 - l2);
    Ok(match inst {
        Instantiation::Scale | Instantiation::AddAngular => s * base,
        Instantiation::MulAngular => s * std::f64::consts::PI * base / 2.0,
        Instantiation::Cosine => base,
    })
}

/// `G(q) = 1/q + q/u_q²` and its derivative.
pub fn regulariser(q: f64, u_q: f64) -> Result<(f64, f64)> {
    if !(q > 0.0) {
        return Err(Error::Domain(format!("regulariser needs q > 0, got {q}")));
    }
    let u2 = u_q * u_q;
    Ok((1.0 / q + q / u2, -1.0 / (q * q) + 1.0 / u2))
}

/// The target logit `A(q, θ)`.
pub fn a_value(inst: Instantiation, q: f64, theta: f64, s: f64) -> f64 {
    match inst {
        Instantiation::Scale => (1.0 - q) * s * theta.cos(),
        Instantiation::MulAngular => s * (q * theta).cos(),
        Instantiation::AddAngular => s * (theta + q).cos(),
        Instantiation::Cosine => s * theta.cos() - q,
    }
}

/// `A` together with `∂A/∂q` and `∂A/∂θ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetPartials {
    pub a: f64,
    pub da_dq: f64,
    pub da_dtheta: f64,
}

pub fn a_partials(inst: Instantiation, q: f64, theta: f64, s: f64) -> TargetPartials {
    let a = a_value(inst, q, theta, s);
    let (da_dq, da_dtheta) = match inst {
        Instantiation::Scale => (-s * theta.cos(), -(1.0 - q) * s * theta.sin()),
        Instantiation::MulAngular => {
            let sn = (q * theta).sin();
            (-s * theta * sn, -s * q * sn)
        }
        Instantiation::AddAngular => {
            let sn = (theta + q).sin();
            (-s * sn, -s * sn)
        }
        Instantiation::Cosine => (-1.0, -s * theta.sin()),
    };
    TargetPartials {
        a,
        da_dq,
        da_dtheta,
    }
}

/// `∂²A/∂θ∂q`, used for the linear continuation of the angular variants past π/2.
fn a_theta_q(inst: Instantiation, q: f64, theta: f64, s: f64) -> f64 {
    match inst {
        Instantiation::Scale => s * theta.sin(),
        Instantiation::MulAngular => -s * ((q * theta).sin() + q * theta * (q * theta).cos()),
        Instantiation::AddAngular => -s * (theta + q).cos(),
        Instantiation::Cosine => 0.0,
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log Σ exp(x)`. Returns −∞ for an empty iterator.
pub fn log_sum_exp<I: IntoIterator<Item = f64> + Clone>(xs: I) -> f64 {
    let max = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.into_iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `−log(e^A / (e^A + R))` with `R` supplied as `log R`.
pub fn gacl_loss(a: f64, log_r: f64) -> Result<f64> {
    if !a.is_finite() || !log_r.is_finite() {
        return Err(invalid("gacl_loss needs finite inputs"));
    }
    Ok(softplus(log_r - a))
}

/// Analytic `dL/dq` for a single sample: the drive term
/// `sigmoid(log R − A)·(−∂A/∂q)` plus `λ_g·G'(q)`.
pub fn gacl_grad_q(
    inst: Instantiation,
    q: f64,
    theta: f64,
    s: f64,
    log_r: f64,
    lambda_g: f64,
    u_q: f64,
) -> Result<f64> {
    let (_, dg) = regulariser(q, u_q)?;
    Ok(drive_term(inst, q, theta, s, log_r) + lambda_g * dg)
}

/// `−(R/(e^A + R))·∇_q A`, the loss-side pressure on `q`.
pub fn drive_term(inst: Instantiation, q: f64, theta: f64, s: f64, log_r: f64) -> f64 {
    let p = a_partials(inst, q, theta, s);
    sigmoid(log_r - p.a) * (-p.da_dq)
}

/// Total single-sample objective `L_GACL + λ_g·G(q)` as a function of `q`.
pub fn total_loss_q(
    inst: Instantiation,
    q: f64,
    theta: f64,
    s: f64,
    log_r: f64,
    lambda_g: f64,
    u_q: f64,
) -> Result<f64> {
    let (g, _) = regulariser(q, u_q)?;
    Ok(gacl_loss(a_value(inst, q, theta, s), log_r)? + lambda_g * g)
}

/// Cross-entropy over `s·cosθ_j` logits.
pub fn normalized_softmax_loss(cosines: &[f64], label: usize, s: f64) -> Result<f64> {
    if label >= cosines.len() {
        return Err(invalid("label out of range"));
    }
    if !(s > 0.0) {
        return Err(config("s must be positive"));
    }
    Ok(log_sum_exp(cosines.iter().map(|c| s * c)) - s * cosines[label])
}

/// `log(1 + (C − 1)·exp(−C·q/(C − 1)))`.
pub fn softmax_lower_bound(class_count: usize, q_raw: f64) -> Result<f64> {
    if class_count < 2 {
        return Err(invalid("lower bound needs at least two classes"));
    }
    if !(q_raw >= 0.0) {
        return Err(invalid("feature magnitude must be non-negative"));
    }
    let c = class_count as f64;
    Ok(softplus((c - 1.0).ln() - c * q_raw / (c - 1.0)))
}

/// Cross-entropy over raw logits `q·cosθ_j` (bias-free, unit prototypes).
pub fn magnitude_softmax_loss(cosines: &[f64], label: usize, q_raw: f64) -> Result<f64> {
    if label >= cosines.len() {
        return Err(invalid("label out of range"));
    }
    Ok(log_sum_exp(cosines.iter().map(|c| q_raw * c)) - q_raw * cosines[label])
}

/// Soft instance-adaptive margin loss
/// `−log(e^{cosθ_y − m} / (e^{cosθ_y − m} + Σ_{j≠y} e^{cosθ_j}))`.
pub fn margin_form_loss(cosines: &[f64], label: usize, margin: f64) -> Result<f64> {
    if label >= cosines.len() || cosines.len() < 2 {
        return Err(invalid("margin loss needs ≥ 2 cosines and a valid label"));
    }
    let log_r = log_sum_exp(
        cosines
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != label)
            .map(|(_, &c)| c),
    );
    gacl_loss(cosines[label] - margin, log_r)
}

/// Frozen first-batch magnitude statistics driving the affine `q` map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub mu0: f64,
    pub sigma0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityCalibration {
    pub l_q: f64,
    pub u_q: f64,
    stats: Option<CalibrationStats>,
}

/// Result of [`scale_quality`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaledQuality {
    pub q: f64,
    /// `dq/dq_raw`; zero when the floor clamp is engaged.
    pub slope: f64,
    pub clamped: bool,
}

impl QualityCalibration {
    pub fn uninitialized(l_q: f64, u_q: f64) -> Self {
        Self {
            l_q,
            u_q,
            stats: None,
        }
    }

    pub fn with_stats(l_q: f64, u_q: f64, mu0: f64, sigma0: f64) -> Result<Self> {
        let mut c = Self::uninitialized(l_q, u_q);
        c.set_stats(mu0, sigma0)?;
        Ok(c)
    }

    pub fn stats(&self) -> Option<CalibrationStats> {
        self.stats
    }

    pub fn is_frozen(&self) -> bool {
        self.stats.is_some()
    }

    /// Freezes mean and (population) standard deviation of `magnitudes`.
    pub fn freeze_from(&mut self, magnitudes: &[f64]) -> Result<()> {
        if magnitudes.is_empty() {
            return Err(invalid("cannot calibrate from an empty batch"));
        }
        let n = magnitudes.len() as f64;
        let mu = magnitudes.iter().sum::<f64>() / n;
        let var = magnitudes.iter().map(|m| (m - mu) * (m - mu)).sum::<f64>() / n;
        self.set_stats(mu, var.sqrt())
    }

    fn set_stats(&mut self, mu0: f64, sigma0: f64) -> Result<()> {
        if self.stats.is_some() {
            return Err(Error::State("calibration is already frozen".into()));
        }
        if !(sigma0 > 0.0) || !sigma0.is_finite() || !mu0.is_finite() {
            return Err(invalid(format!(
                "calibration needs finite mu0 and sigma0 > 0, got ({mu0}, {sigma0})"
            )));
        }
        self.stats = Some(CalibrationStats { mu0, sigma0 });
        Ok(())
    }

    /// `dq/dq_raw` on the unclamped region.
    pub fn slope(&self) -> Result<f64> {
        let st = self.require()?;
        Ok((self.u_q - self.l_q) / (6.0 * st.sigma0))
    }

    fn require(&self) -> Result<CalibrationStats> {
        self.stats
            .ok_or_else(|| Error::State("quality calibration not initialized".into()))
    }
}

/// Affine map of the raw magnitude into the working range: `mu0 ± 3·sigma0`
/// spans `[l_q, u_q]`, with a hard floor at `l_q/2`.
pub fn scale_quality(q_raw: f64, calib: &QualityCalibration) -> Result<ScaledQuality> {
    let st = calib.require()?;
    if !(q_raw >= 0.0) {
        return Err(invalid(format!(
            "raw magnitude must be non-negative, got {q_raw}"
        )));
    }
    let mid = 0.5 * (calib.l_q + calib.u_q);
    let slope = (calib.u_q - calib.l_q) / (6.0 * st.sigma0);
    let q = mid + (q_raw - st.mu0) * slope;
    let floor = 0.5 * calib.l_q;
    if q < floor {
        Ok(ScaledQuality {
            q: floor,
            slope: 0.0,
            clamped: true,
        })
    } else {
        Ok(ScaledQuality {
            q,
            slope,
            clamped: false,
        })
    }
}

/// Unit-norm class prototypes, one row per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototypes {
    rows: Matrix,
}

impl ClassPrototypes {
    pub fn random<R: Rng + ?Sized>(class_count: usize, dim: usize, rng: &mut R) -> Self {
        let data: Vec<f64> = (0..class_count * dim)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        let mut p = Self {
            rows: Matrix::from_vec(class_count, dim, data).expect("shape"),
        };
        p.renormalize();
        p
    }

    /// Rows are normalised on construction.
    pub fn from_matrix(rows: Matrix) -> Result<Self> {
        if rows.rows() < 2 || rows.cols() == 0 {
            return Err(invalid(
                "need at least two prototypes of positive dimension",
            ));
        }
        for r in 0..rows.rows() {
            if norm(rows.row(r)) == 0.0 {
                return Err(invalid("zero prototype"));
            }
        }
        let mut p = Self { rows };
        p.renormalize();
        Ok(p)
    }

    pub fn class_count(&self) -> usize {
        self.rows.rows()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.rows
    }

    pub fn row(&self, j: usize) -> &[f64] {
        self.rows.row(j)
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.rows.data_mut()
    }

    pub fn renormalize(&mut self) {
        for r in 0..self.rows.rows() {
            let row = self.rows.row_mut(r);
            let n = norm(row);
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
    }

    pub fn max_norm_deviation(&self) -> f64 {
        (0..self.rows.rows())
            .map(|r| (norm(self.rows.row(r)) - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Which objective the shared head machinery evaluates.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Target {
    Gacl {
        inst: Instantiation,
        lambda_g: f64,
        u_q: f64,
    },
    /// Plain normalised softmax: `A = s·cosθ_y`, no regulariser.
    Plain,
}

/// Per-sample record of a head evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub label: usize,
    pub q_raw: f64,
    /// Scaled, continuous quality.
    pub q: f64,
    /// The value that entered `A` and `G`: `q`, or its soft-binned value.
    pub q_used: f64,
    pub cosines: Vec<f64>,
    pub theta_y: f64,
    pub a: f64,
    pub log_r: f64,
    /// `L_GACL + λ_g·G(q_used)`.
    pub loss: f64,
    /// `dL/dq_used`.
    pub grad_q: f64,
    /// `dL/dcosθ_j`.
    pub grad_cosines: Vec<f64>,
    /// The sample's feature vector was (numerically) zero.
    pub zero_feature: bool,
    /// `θ_y` exceeded π/2 and `A` was continued linearly.
    pub theta_clipped: bool,
    /// `q` hit the `l_q/2` floor.
    pub q_clamped: bool,
    /// `d q_used / d q_raw`.
    chain: f64,
}

/// Forward results of a batch plus what the backward pass needs.
#[derive(Debug, Clone)]
pub struct HeadBatch {
    pub outputs: Vec<HeadOutput>,
    pub mean_loss: f64,
    s: f64,
    proto_norms: Vec<f64>,
}

impl HeadBatch {
    pub fn theta_clip_rate(&self) -> f64 {
        if self.outputs.is_empty() {
            return 0.0;
        }
        self.outputs.iter().filter(|o| o.theta_clipped).count() as f64 / self.outputs.len() as f64
    }
}

/// Target logit from the raw cosine with `∂A/∂q`, `∂A/∂c`, and the reported angle.
fn target_from_cos(target: Target, q: f64, c: f64, s: f64) -> (f64, f64, f64, f64, bool) {
    let cc = c.clamp(-COS_CLAMP, COS_CLAMP);
    let theta = cc.acos();
    match target {
        Target::Plain => (s * c, 0.0, s, theta, false),
        Target::Gacl { inst, .. } if !inst.is_angular() => {
            // A depends on θ only through cosθ for these two.
            match inst {
                Instantiation::Scale => ((1.0 - q) * s * c, -s * c, (1.0 - q) * s, theta, false),
                _ => (s * c - q, -1.0, s, theta, false),
            }
        }
        Target::Gacl { inst, .. } => {
            let dtheta_dc = if c.abs() > COS_CLAMP {
                0.0
            } else {
                -1.0 / (1.0 - cc * cc).sqrt()
            };
            if theta <= FRAC_PI_2 {
                let p = a_partials(inst, q, theta, s);
                (p.a, p.da_dq, p.da_dtheta * dtheta_dc, theta, false)
            } else {
                let p = a_partials(inst, q, FRAC_PI_2, s);
                let excess = theta - FRAC_PI_2;
                let a = p.a + p.da_dtheta * excess;
                let da_dq = p.da_dq + a_theta_q(inst, q, FRAC_PI_2, s) * excess;
                (a, da_dq, p.da_dtheta * dtheta_dc, theta, true)
            }
        }
    }
}

fn check_batch(features: &Matrix, prototypes: &ClassPrototypes, labels: &[usize]) -> Result<()> {
    if features.cols() != prototypes.dim() {
        return Err(invalid(format!(
            "feature dim {} does not match prototype dim {}",
            features.cols(),
            prototypes.dim()
        )));
    }
    if labels.len() != features.rows() {
        return Err(invalid("label count does not match batch size"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= prototypes.class_count()) {
        return Err(invalid(format!("label {bad} out of range")));
    }
    Ok(())
}

fn forward_impl(
    features: &Matrix,
    prototypes: &ClassPrototypes,
    labels: &[usize],
    target: Target,
    s: f64,
    calib: Option<&QualityCalibration>,
    binning: Option<&BinningSpec>,
) -> Result<HeadBatch> {
    check_batch(features, prototypes, labels)?;
    let proto_norms: Vec<f64> = (0..prototypes.class_count())
        .map(|j| norm(prototypes.row(j)))
        .collect();
    let mut outputs = Vec::with_capacity(features.rows());
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let f = features.row(i);
        let q_raw = norm(f);
        let zero_feature = !(q_raw > 1e-300);
        let cosines: Vec<f64> = (0..prototypes.class_count())
            .map(|j| {
                if zero_feature {
                    0.0
                } else {
                    dot(f, prototypes.row(j)) / (q_raw * proto_norms[j])
                }
            })
            .collect();

        let (q, q_slope, q_clamped) = match (target, calib) {
            (Target::Plain, _) => (q_raw, 0.0, false),
            (Target::Gacl { .. }, Some(cal)) => {
                let sq = scale_quality(q_raw, cal)?;
                (sq.q, sq.slope, sq.clamped)
            }
            (Target::Gacl { .. }, None) => {
                return Err(Error::State("quality calibration not initialized".into()))
            }
        };
        let (q_used, bin_slope) = match (target, binning) {
            (Target::Gacl { .. }, Some(spec)) => spec.soft_bin_with_grad(q),
            _ => (q, 1.0),
        };

        let (a, da_dq, da_dc, theta_y, theta_clipped) =
            target_from_cos(target, q_used, cosines[label], s);
        let non_target = || {
            cosines
                .iter()
                .enumerate()
                .filter(move |&(j, _)| j != label)
                .map(move |(_, &c)| s * c)
        };
        let log_r = log_sum_exp(non_target());
        let drive = sigmoid(log_r - a);
        let mut loss = gacl_loss(a, log_r)?;
        let mut grad_q = -drive * da_dq;
        if let Target::Gacl { lambda_g, u_q, .. } = target {
            let (g, dg) = regulariser(q_used, u_q)?;
            loss += lambda_g * g;
            grad_q += lambda_g * dg;
        }
        let grad_cosines: Vec<f64> = cosines
            .iter()
            .enumerate()
            .map(|(j, &c)| {
                if j == label {
                    -drive * da_dc
                } else {
                    drive * s * (s * c - log_r).exp()
                }
            })
            .collect();
        total += loss;
        outputs.push(HeadOutput {
            label,
            q_raw,
            q,
            q_used,
            cosines,
            theta_y,
            a,
            log_r,
            loss,
            grad_q,
            grad_cosines,
            zero_feature,
            theta_clipped,
            q_clamped,
            chain: q_slope * bin_slope,
        });
    }
    let n = outputs.len().max(1) as f64;
    Ok(HeadBatch {
        outputs,
        mean_loss: total / n,
        s,
        proto_norms,
    })
}

/// Evaluates the head on a batch. When `binning` is given, the soft-binned
/// `q̂` replaces `q` inside the objective.
pub fn head_forward(
    features: &Matrix,
    prototypes: &ClassPrototypes,
    labels: &[usize],
    config: &HeadConfig,
    calib: &QualityCalibration,
    binning: Option<&BinningSpec>,
) -> Result<HeadBatch> {
    let target = Target::Gacl {
        inst: config.instantiation,
        lambda_g: config.lambda_g,
        u_q: config.u_q,
    };
    forward_impl(
        features,
        prototypes,
        labels,
        target,
        config.s,
        Some(calib),
        binning,
    )
}

/// Normalised-softmax baseline through the same machinery.
pub fn softmax_forward(
    features: &Matrix,
    prototypes: &ClassPrototypes,
    labels: &[usize],
    s: f64,
) -> Result<HeadBatch> {
    forward_impl(features, prototypes, labels, Target::Plain, s, None, None)
}

/// Gradients of the batch-mean loss with respect to the features and the
/// (un-normalised) prototype rows.
pub fn head_backward(
    batch: &HeadBatch,
    features: &Matrix,
    prototypes: &ClassPrototypes,
) -> Result<(Matrix, Matrix)> {
    if batch.outputs.len() != features.rows() || batch.proto_norms.len() != prototypes.class_count()
    {
        return Err(Error::State(
            "head_backward called without a matching forward pass".into(),
        ));
    }
    let _ = batch.s;
    let n = features.rows().max(1) as f64;
    let d = features.cols();
    let classes = prototypes.class_count();
    let mut grad_f = Matrix::zeros(features.rows(), d);
    let mut grad_w = Matrix::zeros(classes, d);
    let unit_protos: Vec<Vec<f64>> = (0..classes)
        .map(|j| {
            prototypes
                .row(j)
                .iter()
                .map(|w| w / batch.proto_norms[j])
                .collect()
        })
        .collect();
    for (i, out) in batch.outputs.iter().enumerate() {
        if out.zero_feature {
            continue;
        }
        let f = features.row(i);
        let inv = 1.0 / out.q_raw;
        let u: Vec<f64> = f.iter().map(|v| v * inv).collect();
        let gq_raw = out.grad_q * out.chain;
        let gf = grad_f.row_mut(i);
        for k in 0..d {
            gf[k] += gq_raw * u[k];
        }
        for j in 0..classes {
            let gc = out.grad_cosines[j];
            if gc == 0.0 {
                continue;
            }
            let c = out.cosines[j];
            let wj = &unit_protos[j];
            for k in 0..d {
                gf[k] += gc * (wj[k] - c * u[k]) * inv;
            }
            let inv_w = 1.0 / batch.proto_norms[j];
            let gw = grad_w.row_mut(j);
            for k in 0..d {
                gw[k] += gc * (u[k] - c * wj[k]) * inv_w;
            }
        }
    }
    grad_f.data_mut().iter_mut().for_each(|v| *v /= n);
    grad_w.data_mut().iter_mut().for_each(|v| *v /= n);
    Ok((grad_f, grad_w))
}
