//! Runnable checks of the three constraints on `A(q, θ)` and of gradient
//! fidelity, for any [`HeadConfig`].
//!
//! * geometry: `∇_q A / ∇_θ A > 0` pointwise;
//! * co-optimisation: after one step `q' = q − ξ·∇_q L`, `∇_θ A(q', θ) ≤ 0`;
//! * optimality: `∇_q L(l_q) < 0 < ∇_q L(u_q)` with exactly one sign change.

use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::binning::BinningSpec;
use crate::engine::Matrix;
use crate::error::{config, Result};
use crate::gradcheck::{central_difference, rel_err};
use crate::head::{
    a_partials, gacl_grad_q, head_backward, head_forward, total_loss_q, ClassPrototypes,
    HeadConfig, Instantiation, QualityCalibration, COS_CLAMP,
};

/// Relative-error acceptance threshold for analytic vs. numeric gradients.
pub const GRAD_TOLERANCE: f64 = 1e-5;
/// Denominator floor of the relative error. For head gradients it is
/// multiplied by `max(1, |L|)`.
pub const REL_ERR_FLOOR: f64 = 1e-4;
/// Listed violations are capped; counts are always exact.
const MAX_LISTED: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstraintGrid {
    pub q_points: usize,
    pub theta_points: usize,
    pub theta_min: f64,
    pub theta_max: f64,
    /// Values of `log R` at which loss-dependent checks are evaluated.
    pub log_r_values: Vec<f64>,
}

impl ConstraintGrid {
    /// 50 × 50 over `θ ∈ [0.05, π/2 − 0.05]`, with `log R` spanning every
    /// attainable value `ln(C−1) ± s` in five steps.
    pub fn for_config(cfg: &HeadConfig) -> Self {
        let base = ((cfg.class_count - 1) as f64).ln();
        let log_r_values = (0..5)
            .map(|k| base - cfg.s + k as f64 * cfg.s / 2.0)
            .collect();
        Self {
            q_points: 50,
            theta_points: 50,
            theta_min: 0.05,
            theta_max: FRAC_PI_2 - 0.05,
            log_r_values,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.q_points < 2 || self.theta_points < 1 || self.log_r_values.is_empty() {
            return Err(config(
                "grid needs ≥2 q points, ≥1 θ point and ≥1 log R value",
            ));
        }
        if !(self.theta_min <= self.theta_max) {
            return Err(config("grid θ range is empty"));
        }
        Ok(())
    }

    pub fn thetas(&self) -> Vec<f64> {
        linspace(self.theta_min, self.theta_max, self.theta_points)
    }

    pub fn qs(&self, cfg: &HeadConfig) -> Vec<f64> {
        linspace(cfg.l_q, cfg.u_q, self.q_points)
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n)
        .map(|k| a + (b - a) * k as f64 / (n - 1) as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridViolation {
    pub q: f64,
    pub theta: f64,
    pub log_r: Option<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstraintReport {
    pub check: &'static str,
    pub instantiation: Instantiation,
    pub passed: bool,
    pub points_checked: usize,
    pub violation_count: usize,
    /// Minimum of the checked quantity (ratio for geometry, `−∇_θA` for co-optimisation).
    pub worst_value: f64,
    pub violations: Vec<GridViolation>,
}

impl ConstraintReport {
    fn new(check: &'static str, inst: Instantiation) -> Self {
        Self {
            check,
            instantiation: inst,
            passed: true,
            points_checked: 0,
            violation_count: 0,
            worst_value: f64::INFINITY,
            violations: Vec::new(),
        }
    }

    fn record(&mut self, ok: bool, value: f64, v: GridViolation) {
        self.points_checked += 1;
        if value < self.worst_value || value.is_nan() {
            self.worst_value = value;
        }
        if !ok {
            self.passed = false;
            self.violation_count += 1;
            if self.violations.len() < MAX_LISTED {
                self.violations.push(v);
            }
        }
    }
}

/// `∇_q A / ∇_θ A > 0` at every grid point; NaN ratios count as violations.
pub fn check_geometry(cfg: &HeadConfig, grid: &ConstraintGrid) -> Result<ConstraintReport> {
    grid.validate()?;
    let inst = cfg.instantiation;
    let mut rep = ConstraintReport::new("geometry", inst);
    for &q in &grid.qs(cfg) {
        for &theta in &grid.thetas() {
            let p = a_partials(inst, q, theta, cfg.s);
            let ratio = p.da_dq / p.da_dtheta;
            rep.record(
                ratio > 0.0,
                ratio,
                GridViolation {
                    q,
                    theta,
                    log_r: None,
                    value: ratio,
                },
            );
        }
    }
    Ok(rep)
}

/// Simulates `q' = q − ξ·∇_q L` and requires `∇_θ A(q', θ) ≤ 0`.
pub fn check_cooptimisation(
    cfg: &HeadConfig,
    xi: f64,
    grid: &ConstraintGrid,
) -> Result<ConstraintReport> {
    grid.validate()?;
    if !(xi >= 0.0) {
        return Err(config("step size ξ must be non-negative"));
    }
    let inst = cfg.instantiation;
    let mut rep = ConstraintReport::new("co-optimisation", inst);
    for &q in &grid.qs(cfg) {
        for &theta in &grid.thetas() {
            for &log_r in &grid.log_r_values {
                let g = gacl_grad_q(inst, q, theta, cfg.s, log_r, cfg.lambda_g, cfg.u_q)?;
                let q_next = q - xi * g;
                let da_dtheta = a_partials(inst, q_next, theta, cfg.s).da_dtheta;
                rep.record(
                    da_dtheta <= 0.0,
                    -da_dtheta,
                    GridViolation {
                        q: q_next,
                        theta,
                        log_r: Some(log_r),
                        value: da_dtheta,
                    },
                );
            }
        }
    }
    Ok(rep)
}

/// Default resolution of the optimality sweep along `q`.
pub const OPTIMALITY_Q_POINTS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimumRecord {
    pub theta: f64,
    pub log_r: f64,
    pub grad_at_lower: f64,
    pub grad_at_upper: f64,
    pub sign_changes: usize,
    /// Interior root of `∇_q L`, when exactly one sign change exists.
    pub q_star: Option<f64>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimalityReport {
    pub check: &'static str,
    pub instantiation: Instantiation,
    pub passed: bool,
    pub lambda_g: f64,
    pub lambda_bound: f64,
    pub failures: usize,
    pub records: Vec<OptimumRecord>,
}

/// For each `(θ, log R)` on the grid: `∇_q L(l_q) < 0`, `∇_q L(u_q) > 0` and a
/// single sign change on a `q_points`-point sweep.
pub fn check_optimality(
    cfg: &HeadConfig,
    grid: &ConstraintGrid,
    q_points: usize,
) -> Result<OptimalityReport> {
    grid.validate()?;
    if q_points < 2 {
        return Err(config("optimality sweep needs at least two q points"));
    }
    let inst = cfg.instantiation;
    let grad = |q: f64, theta: f64, log_r: f64| {
        gacl_grad_q(inst, q, theta, cfg.s, log_r, cfg.lambda_g, cfg.u_q)
    };
    let qs = linspace(cfg.l_q, cfg.u_q, q_points);
    let mut records = Vec::new();
    let mut failures = 0;
    for &theta in &grid.thetas() {
        for &log_r in &grid.log_r_values {
            let mut sign_changes = 0;
            let mut prev: Option<bool> = None;
            let mut bracket = None;
            for &q in &qs {
                let g = grad(q, theta, log_r)?;
                let pos = g > 0.0;
                if let Some(p) = prev {
                    if p != pos {
                        sign_changes += 1;
                        bracket = Some(q);
                    }
                }
                prev = Some(pos);
            }
            let g_lo = grad(cfg.l_q, theta, log_r)?;
            let g_hi = grad(cfg.u_q, theta, log_r)?;
            let passed = g_lo < 0.0 && g_hi > 0.0 && sign_changes == 1;
            let q_star = match (passed, bracket) {
                (true, Some(hi)) => {
                    let step = (cfg.u_q - cfg.l_q) / (q_points - 1) as f64;
                    Some(bisect(
                        |q| grad(q, theta, log_r).unwrap_or(f64::NAN),
                        hi - step,
                        hi,
                    ))
                }
                _ => None,
            };
            if !passed {
                failures += 1;
            }
            records.push(OptimumRecord {
                theta,
                log_r,
                grad_at_lower: g_lo,
                grad_at_upper: g_hi,
                sign_changes,
                q_star,
                passed,
            });
        }
    }
    Ok(OptimalityReport {
        check: "optimality",
        instantiation: inst,
        passed: failures == 0,
        lambda_g: cfg.lambda_g,
        lambda_bound: cfg.lambda_bound(),
        failures,
        records,
    })
}

fn bisect<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FiniteDiffReport {
    pub instantiation: Instantiation,
    pub trials: usize,
    /// Trials containing an all-zero feature row (magnitude undefined); the
    /// zero rows contribute no gradient and are not compared.
    pub zero_feature_rows: usize,
    pub entries_checked: usize,
    pub max_rel_err_grad_q: f64,
    pub max_rel_err_backward: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Random heads evaluated against fourth-order central differences.
pub fn finite_diff_suite(cfg: &HeadConfig, trials: usize, seed: u64) -> Result<FiniteDiffReport> {
    if trials == 0 {
        return Err(config("finite-difference suite needs at least one trial"));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inst = cfg.instantiation;
    let mut max_q = 0.0f64;
    let mut max_b = 0.0f64;
    let mut entries = 0;
    let mut zero_rows = 0;
    for trial in 0..trials {
        // Scalar dL/dq.
        let q = rng.random_range(cfg.l_q..cfg.u_q);
        let theta = rng.random_range(0.05..FRAC_PI_2 - 0.05);
        let log_r = rng.random_range(-cfg.s..cfg.s);
        let analytic = gacl_grad_q(inst, q, theta, cfg.s, log_r, cfg.lambda_g, cfg.u_q)?;
        let numeric = central_difference(
            |x| {
                total_loss_q(inst, x, theta, cfg.s, log_r, cfg.lambda_g, cfg.u_q)
                    .unwrap_or(f64::NAN)
            },
            q,
            1e-5,
        );
        max_q = max_q.max(rel_err(analytic, numeric, REL_ERR_FLOOR));

        let with_zero = trial % 50 == 49;
        let (e, err) = head_trial(cfg, &mut rng, with_zero)?;
        if with_zero {
            zero_rows += 1;
        }
        entries += e;
        max_b = max_b.max(err);
    }
    let passed = max_q < GRAD_TOLERANCE && max_b < GRAD_TOLERANCE;
    Ok(FiniteDiffReport {
        instantiation: inst,
        trials,
        zero_feature_rows: zero_rows,
        entries_checked: entries,
        max_rel_err_grad_q: max_q,
        max_rel_err_backward: max_b,
        tolerance: GRAD_TOLERANCE,
        passed,
    })
}

/// Samples a random head problem away from the non-smooth points of the
/// objective (q floor, cosine clamp, π/2 continuation for angular targets) and returns `(entries compared, max relative error)`.
fn head_trial(cfg: &HeadConfig, rng: &mut ChaCha8Rng, with_zero: bool) -> Result<(usize, f64)> {
    let inst = cfg.instantiation;
    let d = rng.random_range(2..7);
    let classes = cfg.class_count;
    let n = rng.random_range(1..4);
    loop {
        let protos_data: Vec<f64> = (0..classes * d)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let protos = ClassPrototypes::from_matrix(Matrix::from_vec(classes, d, protos_data)?)?;
        // Perturb norms so the prototype normalisation chain is exercised.
        let mut protos_scaled = protos.clone();
        for j in 0..classes {
            let k = rng.random_range(0.5..2.0);
            protos_scaled.data_mut()[j * d..(j + 1) * d]
                .iter_mut()
                .for_each(|v| *v *= k);
        }
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let mut feats = Vec::with_capacity(n * d);
        let confident = rng.random_bool(0.3);
        for &y in &labels {
            let mag = rng.random_range(0.5..3.0);
            let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            if confident {
                // Drive the target cosine towards 1 so s·cos logits are extreme.
                for (x, w) in v.iter_mut().zip(protos.row(y)) {
                    *x = 0.15 * *x + 2.0 * w;
                }
            }
            let nv = crate::engine::norm(&v);
            feats.extend(v.iter().map(|x| x * mag / nv));
        }
        if with_zero {
            feats[..d].iter_mut().for_each(|v| *v = 0.0);
        }
        let features = Matrix::from_vec(n, d, feats)?;
        let calib = QualityCalibration::with_stats(cfg.l_q, cfg.u_q, 1.75, 0.45)?;
        let binning = if rng.random_bool(0.3) {
            Some(BinningSpec::with_relative_tau(
                rng.random_range(1..21),
                cfg.l_q,
                cfg.u_q,
                1.0,
            )?)
        } else {
            None
        };
        let batch = head_forward(
            &features,
            &protos_scaled,
            &labels,
            cfg,
            &calib,
            binning.as_ref(),
        )?;
        let near_kink = batch.outputs.iter().any(|o| {
            if o.zero_feature {
                return false;
            }
            let floor_gap = o.q - 0.5 * cfg.l_q;
            let c_gap = o
                .cosines
                .iter()
                .map(|c| COS_CLAMP - c.abs())
                .fold(f64::INFINITY, f64::min);
            let angular = matches!(inst, Instantiation::MulAngular | Instantiation::AddAngular);
            floor_gap < 1e-3 || c_gap < 1e-4 || (angular && (o.theta_y - FRAC_PI_2).abs() < 1e-3)
        });
        if near_kink {
            continue;
        }
        let (gf, gw) = head_backward(&batch, &features, &protos_scaled)?;
        let loss_at = |f: &Matrix, p: &ClassPrototypes| {
            head_forward(f, p, &labels, cfg, &calib, binning.as_ref())
                .map(|b| b.mean_loss)
                .unwrap_or(f64::NAN)
        };
        let h = 1e-4;
        // Rounding in the numeric derivative grows with the loss value.
        let floor = REL_ERR_FLOOR * batch.mean_loss.abs().max(1.0);
        let mut worst = 0.0f64;
        let mut count = 0;
        let start = if with_zero { d } else { 0 };
        for idx in start..n * d {
            let numeric = central_difference(
                |x| {
                    let mut f = features.clone();
                    f.data_mut()[idx] = x;
                    loss_at(&f, &protos_scaled)
                },
                features.data()[idx],
                h,
            );
            let e = rel_err(gf.data()[idx], numeric, floor);
            worst = worst.max(e);
            count += 1;
        }
        for idx in 0..classes * d {
            let base = protos_scaled.matrix().data()[idx];
            let numeric = central_difference(
                |x| {
                    let mut p = protos_scaled.clone();
                    p.data_mut()[idx] = x;
                    loss_at(&features, &p)
                },
                base,
                h,
            );
            let e = rel_err(gw.data()[idx], numeric, floor);
            worst = worst.max(e);
            count += 1;
        }
        return Ok((count, worst));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub instantiation: Instantiation,
    pub config: HeadConfig,
    pub geometry: ConstraintReport,
    pub cooptimisation: ConstraintReport,
    pub optimality: OptimalityReport,
    pub finite_diff: Option<FiniteDiffReport>,
    pub passed: bool,
}

/// Every check for one config. `fd_trials = 0` skips the gradient suite, as
/// does a `λ_g` at or below its bound (the config is still checked so the
/// report shows which constraint breaks).
pub fn verify_config(
    cfg: &HeadConfig,
    xi: f64,
    fd_trials: usize,
    seed: u64,
) -> Result<VerifyReport> {
    let mut structural = *cfg;
    structural.lambda_g = f64::INFINITY;
    structural.validate()?;
    let lambda_ok = cfg.validate().is_ok();
    let grid = ConstraintGrid::for_config(cfg);
    let geometry = check_geometry(cfg, &grid)?;
    let cooptimisation = check_cooptimisation(cfg, xi, &grid)?;
    let optimality = check_optimality(cfg, &grid, OPTIMALITY_Q_POINTS)?;
    let finite_diff = if fd_trials > 0 && lambda_ok {
        Some(finite_diff_suite(cfg, fd_trials, seed)?)
    } else {
        None
    };
    let passed = lambda_ok
        && geometry.passed
        && cooptimisation.passed
        && optimality.passed
        && finite_diff.as_ref().is_none_or(|f| f.passed);
    Ok(VerifyReport {
        instantiation: cfg.instantiation,
        config: *cfg,
        geometry,
        cooptimisation,
        optimality,
        finite_diff,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preset(inst: Instantiation) -> HeadConfig {
        HeadConfig::preset(inst, 10, 8)
    }

    #[test]
    fn presets_pass_geometry() {
        for inst in Instantiation::ALL {
            let cfg = preset(inst);
            let rep = check_geometry(&cfg, &ConstraintGrid::for_config(&cfg)).unwrap();
            assert!(rep.passed, "{inst}: {:?}", rep.violations.first());
            assert_eq!(rep.points_checked, 2500);
        }
    }

    #[test]
    fn scale_beyond_unit_q_violates_geometry() {
        let mut cfg = preset(Instantiation::Scale);
        cfg.l_q = 0.8;
        cfg.u_q = 1.5;
        cfg.lambda_g = 1.05 * cfg.lambda_bound();
        let rep = check_geometry(&cfg, &ConstraintGrid::for_config(&cfg)).unwrap();
        assert!(!rep.passed && rep.violation_count > 0);
        assert!(rep.violations.iter().all(|v| v.q > 1.0 - 1e-12));
    }

    #[test]
    fn add_past_pi_breaks_cooptimisation() {
        let mut cfg = preset(Instantiation::AddAngular);
        cfg.l_q = 1.5;
        cfg.u_q = 2.5;
        cfg.lambda_g = 1.05 * cfg.lambda_bound();
        let mut grid = ConstraintGrid::for_config(&cfg);
        grid.theta_max = 1.5;
        let rep = check_cooptimisation(&cfg, 1e-3, &grid).unwrap();
        assert!(!rep.passed);
        assert!(rep
            .violations
            .iter()
            .all(|v| v.q + v.theta > std::f64::consts::PI));
    }

    #[test]
    fn presets_pass_cooptimisation() {
        for inst in Instantiation::ALL {
            let cfg = preset(inst);
            let grid = ConstraintGrid::for_config(&cfg);
            assert!(
                check_cooptimisation(&cfg, 1e-3, &grid).unwrap().passed,
                "{inst}"
            );
            assert!(
                check_cooptimisation(&cfg, 0.0, &grid).unwrap().passed,
                "{inst}"
            );
        }
    }

    #[test]
    fn theta_zero_boundary_passes_with_equality() {
        let cfg = preset(Instantiation::Cosine);
        let mut grid = ConstraintGrid::for_config(&cfg);
        grid.theta_min = 0.0;
        grid.theta_max = 0.0;
        grid.theta_points = 1;
        let rep = check_cooptimisation(&cfg, 1e-3, &grid).unwrap();
        assert!(rep.passed);
        assert_eq!(rep.worst_value, 0.0);
    }

    #[test]
    fn cosine_preset_has_single_optimum() {
        let cfg = preset(Instantiation::Cosine);
        assert!((cfg.lambda_g - 1.05 * 0.151497).abs() < 1e-5);
        let rep =
            check_optimality(&cfg, &ConstraintGrid::for_config(&cfg), OPTIMALITY_Q_POINTS).unwrap();
        assert!(rep.passed);
        for r in &rep.records {
            let q = r.q_star.unwrap();
            assert!(q > cfg.l_q && q <= cfg.u_q, "{r:?}");
        }
    }

    #[test]
    fn zero_lambda_fails_at_lower_bound() {
        let mut cfg = preset(Instantiation::Cosine);
        cfg.lambda_g = 0.0;
        let rep = check_optimality(&cfg, &ConstraintGrid::for_config(&cfg), 200).unwrap();
        assert!(!rep.passed);
        assert!(rep.records.iter().all(|r| r.grad_at_lower > 0.0));
    }

    #[test]
    fn scale_small_theta_still_has_optimum() {
        let cfg = preset(Instantiation::Scale);
        let mut grid = ConstraintGrid::for_config(&cfg);
        grid.theta_min = 1e-4;
        grid.theta_max = 1e-2;
        grid.theta_points = 5;
        assert!(
            check_optimality(&cfg, &grid, OPTIMALITY_Q_POINTS)
                .unwrap()
                .passed
        );
    }

    #[test]
    fn verify_config_reports_failures() {
        let cfg = preset(Instantiation::AddAngular);
        let rep = verify_config(&cfg, 1e-3, 5, 0).unwrap();
        assert!(rep.passed && rep.finite_diff.is_some());
        let mut weak = cfg;
        weak.lambda_g = 0.0;
        let rep = verify_config(&weak, 1e-3, 5, 0).unwrap();
        assert!(!rep.passed && rep.finite_diff.is_none() && !rep.optimality.passed);
        let mut broken = cfg;
        broken.l_q = 2.0;
        assert!(verify_config(&broken, 1e-3, 0, 0).is_err());
    }

    #[test]
    fn finite_diff_suite_small() {
        for inst in Instantiation::ALL {
            let rep = finite_diff_suite(&preset(inst), 60, 11).unwrap();
            assert!(rep.passed, "{inst}: {rep:?}");
            assert_eq!(rep.zero_feature_rows, 1);
        }
        assert!(finite_diff_suite(&preset(Instantiation::Cosine), 0, 0).is_err());
    }
}
