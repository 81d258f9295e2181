//! Differentiable soft binning of the quality score.
//!
//! With `n` fixed cut points `β` the logits `(w·q + b)/τ`, `w = [1, …, n+1]`,
//! `b = [0, −β₁, −β₁−β₂, …]` satisfy `logit_{k+1} − logit_k = (q − β_k)/τ`, so
//! the softmax concentrates on the interval that contains `q` as `τ → 0`.
//! Each of the `n + 1` intervals is represented by its midpoint.

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

/// Default temperature as a fraction of one bin width.
pub const DEFAULT_RELATIVE_TAU: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinningSpec {
    cutpoints: Vec<f64>,
    representatives: Vec<f64>,
    offsets: Vec<f64>,
    tau: f64,
}

impl BinningSpec {
    /// `n` equally spaced cut points inside `(l_q, u_q)` with an absolute temperature.
    pub fn new(n: usize, l_q: f64, u_q: f64, tau: f64) -> Result<Self> {
        if n == 0 {
            return Err(config("soft binning needs at least one cut point"));
        }
        if !(l_q < u_q) {
            return Err(config("binning range must satisfy l_q < u_q"));
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(config(format!("temperature must be positive, got {tau}")));
        }
        let width = (u_q - l_q) / (n as f64 + 1.0);
        let cutpoints: Vec<f64> = (1..=n).map(|k| l_q + k as f64 * width).collect();
        let mut edges = Vec::with_capacity(n + 2);
        edges.push(l_q);
        edges.extend_from_slice(&cutpoints);
        edges.push(u_q);
        let representatives = edges.windows(2).map(|e| 0.5 * (e[0] + e[1])).collect();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut acc = 0.0;
        offsets.push(0.0);
        for &b in &cutpoints {
            acc -= b;
            offsets.push(acc);
        }
        Ok(Self {
            cutpoints,
            representatives,
            offsets,
            tau,
        })
    }

    /// Temperature set to `relative_tau` bin widths.
    pub fn with_relative_tau(n: usize, l_q: f64, u_q: f64, relative_tau: f64) -> Result<Self> {
        let width = (u_q - l_q) / (n as f64 + 1.0);
        Self::new(n, l_q, u_q, relative_tau * width)
    }

    pub fn cutpoints(&self) -> &[f64] {
        &self.cutpoints
    }

    pub fn representatives(&self) -> &[f64] {
        &self.representatives
    }

    /// The `b` vector of the affine logits.
    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Bin membership probabilities `o`.
    pub fn assignments(&self, q: f64) -> Vec<f64> {
        let logits: Vec<f64> = self
            .offsets
            .iter()
            .enumerate()
            .map(|(k, &b)| ((k as f64 + 1.0) * q + b) / self.tau)
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut o: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let sum: f64 = o.iter().sum();
        o.iter_mut().for_each(|v| *v /= sum);
        o
    }

    /// `q̂` and `dq̂/dq`.
    pub fn soft_bin_with_grad(&self, q: f64) -> (f64, f64) {
        let o = self.assignments(q);
        let mean_w: f64 = o
            .iter()
            .enumerate()
            .map(|(k, p)| (k as f64 + 1.0) * p)
            .sum();
        let mut value = 0.0;
        let mut grad = 0.0;
        for (k, (&p, &v)) in o.iter().zip(&self.representatives).enumerate() {
            value += p * v;
            grad += p * v * ((k as f64 + 1.0) - mean_w);
        }
        (value, grad / self.tau)
    }

    pub fn soft_bin(&self, q: f64) -> f64 {
        self.soft_bin_with_grad(q).0
    }
}

/// `n` cut points on `[l_q, u_q]` with the default relative temperature.
pub fn make_cutpoints(n: usize, l_q: f64, u_q: f64) -> Result<BinningSpec> {
    BinningSpec::with_relative_tau(n, l_q, u_q, DEFAULT_RELATIVE_TAU)
}

pub fn soft_bin(q: f64, spec: &BinningSpec) -> f64 {
    spec.soft_bin(q)
}

/// Epoch-indexed cut-point schedule: a constant warm-up count, then a linear
/// ramp (rounded to nearest) to the final count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinningSchedule {
    pub initial_cutpoints: usize,
    pub warmup_epochs: usize,
    pub final_cutpoints: usize,
    /// Last epoch of the ramp; at this epoch the final count is reached.
    pub ramp_end_epoch: usize,
    /// Keep binning at the final count after the ramp instead of switching off.
    pub keep_after_ramp: bool,
    /// Temperature in bin widths.
    pub relative_tau: f64,
}

impl Default for BinningSchedule {
    fn default() -> Self {
        Self {
            initial_cutpoints: 5,
            warmup_epochs: 5,
            final_cutpoints: 20,
            ramp_end_epoch: 19,
            keep_after_ramp: false,
            relative_tau: DEFAULT_RELATIVE_TAU,
        }
    }
}

impl BinningSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.initial_cutpoints == 0 || self.final_cutpoints == 0 {
            return Err(config("cut-point counts must be positive"));
        }
        if self.warmup_epochs == 0 || self.ramp_end_epoch + 1 < self.warmup_epochs {
            return Err(config("ramp must end at or after the warm-up"));
        }
        if !(self.relative_tau > 0.0) {
            return Err(config("relative temperature must be positive"));
        }
        Ok(())
    }

    /// Number of cut points active at `epoch`, or `None` once binning is off.
    pub fn cutpoints_at(&self, epoch: usize) -> Option<usize> {
        if epoch < self.warmup_epochs {
            return Some(self.initial_cutpoints);
        }
        if epoch > self.ramp_end_epoch {
            return self.keep_after_ramp.then_some(self.final_cutpoints);
        }
        let start = self.warmup_epochs - 1;
        let span = (self.ramp_end_epoch - start) as f64;
        let frac = (epoch - start) as f64 / span;
        let n = self.initial_cutpoints as f64
            + frac * (self.final_cutpoints as f64 - self.initial_cutpoints as f64);
        Some(n.round() as usize)
    }

    pub fn spec_at(&self, epoch: usize, l_q: f64, u_q: f64) -> Result<Option<BinningSpec>> {
        self.cutpoints_at(epoch)
            .map(|n| BinningSpec::with_relative_tau(n, l_q, u_q, self.relative_tau))
            .transpose()
    }
}

/// Cut-point count for `epoch` under the default schedule (0 when binning is off).
pub fn schedule_cutpoints(epoch: usize) -> usize {
    BinningSchedule::default().cutpoints_at(epoch).unwrap_or(0)
}
