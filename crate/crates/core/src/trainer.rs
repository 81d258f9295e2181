//! Training loop: MLP backbone + GACL (or normalised-softmax) head, Adam with
//! per-epoch cosine warm restarts, soft-binning schedule, optional k-means
//! pseudo-labels, evaluation and JSON checkpoints.

use std::io::{Read, Write};

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binning::BinningSchedule;
use crate::datagen::{pseudo_label, shuffled_indices, LabeledSet};
use crate::engine::{
    cosine_warm_restart_lr, dot, norm, Matrix, MlpModel, OptimizerState, StepOutcome,
};
use crate::error::{config, invalid, Error, Result};
use crate::head::{
    head_backward, head_forward, scale_quality, softmax_forward, ClassPrototypes, HeadConfig,
    Instantiation, QualityCalibration, COS_CLAMP,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Gacl,
    NormSoftmax,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gacl" => Ok(Objective::Gacl),
            "softmax" | "norm-softmax" => Ok(Objective::NormSoftmax),
            _ => Err(config(format!("unknown objective '{s}' (gacl|softmax)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub head: HeadConfig,
    pub objective: Objective,
    /// `None` disables soft binning.
    pub binning: Option<BinningSchedule>,
    /// Re-cluster every this many epochs; 0 trains on the given labels.
    pub pseudo_label_period: usize,
    pub hidden: Vec<usize>,
    pub standardize_inputs: bool,
    /// Scale every (standardised) input row to unit length.
    pub unit_norm_inputs: bool,
    /// Record a (q, θ) snapshot every this many epochs besides the last; 0 = last only.
    pub snapshot_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(head: HeadConfig) -> Self {
        Self {
            epochs: 20,
            batch_size: 256,
            lr: 1e-3,
            lr_min: 0.0,
            head,
            objective: Objective::Gacl,
            binning: Some(BinningSchedule::default()),
            pseudo_label_period: 0,
            hidden: vec![64, 64, 64],
            standardize_inputs: true,
            unit_norm_inputs: false,
            snapshot_every: 0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(config("epochs must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(config(
                "batch_size must be at least 2 (the first batch calibrates q)",
            ));
        }
        if !(self.lr > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr {
            return Err(config(
                "learning rates must satisfy 0 ≤ lr_min ≤ lr, lr > 0",
            ));
        }
        if self.hidden.contains(&0) {
            return Err(config("hidden widths must be positive"));
        }
        if let Some(b) = &self.binning {
            b.validate()?;
        }
        self.head.validate()
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| config(format!("bad value '{v}' for '{key}'")))
        }
        let h = &mut self.head;
        match key {
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "lr_min" => self.lr_min = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "objective" => self.objective = value.parse()?,
            "pseudo_label_period" => self.pseudo_label_period = num(key, value)?,
            "standardize_inputs" => self.standardize_inputs = num(key, value)?,
            "unit_norm_inputs" => self.unit_norm_inputs = num(key, value)?,
            "snapshot_every" => self.snapshot_every = num(key, value)?,
            "hidden" => {
                self.hidden = if value.trim().is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|w| num(key, w.trim()))
                        .collect::<Result<_>>()?
                }
            }
            "preset" => {
                let inst: Instantiation = value.parse()?;
                *h = HeadConfig::preset(inst, h.class_count, h.feature_dim);
            }
            "s" => h.s = num(key, value)?,
            "l_q" => h.l_q = num(key, value)?,
            "u_q" => h.u_q = num(key, value)?,
            "lambda_g" => h.lambda_g = num(key, value)?,
            "class_count" => h.class_count = num(key, value)?,
            "feature_dim" => h.feature_dim = num(key, value)?,
            "binning" => {
                self.binning = match value {
                    "on" | "true" => Some(self.binning.unwrap_or_default()),
                    "off" | "false" => None,
                    _ => return Err(config(format!("binning must be on|off, got '{value}'"))),
                }
            }
            k if k.starts_with("binning.") => {
                let b = self.binning.get_or_insert_with(BinningSchedule::default);
                match &k["binning.".len()..] {
                    "initial_cutpoints" => b.initial_cutpoints = num(key, value)?,
                    "warmup_epochs" => b.warmup_epochs = num(key, value)?,
                    "final_cutpoints" => b.final_cutpoints = num(key, value)?,
                    "ramp_end_epoch" => b.ramp_end_epoch = num(key, value)?,
                    "keep_after_ramp" => b.keep_after_ramp = num(key, value)?,
                    "relative_tau" => b.relative_tau = num(key, value)?,
                    _ => return Err(config(format!("unknown config key '{key}'"))),
                }
            }
            _ => return Err(config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Parses flat `key = value` lines; `#` starts a comment. `preset`, when
    /// present, is applied first so later keys can override its values.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        let mut pairs = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config(format!("line {}: expected key = value", ln + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        pairs.sort_by_key(|(k, _)| k != "preset");
        for (k, v) in pairs {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let h = &self.head;
        let mut out = format!(
            "epochs = {}\nbatch_size = {}\nlr = {}\nlr_min = {}\nseed = {}\nobjective = {}\n\
             pseudo_label_period = {}\nstandardize_inputs = {}\nunit_norm_inputs = {}\nsnapshot_every = {}\nhidden = {}\n\
             preset = {}\ns = {}\nl_q = {}\nu_q = {}\nlambda_g = {}\nclass_count = {}\nfeature_dim = {}\n",
            self.epochs,
            self.batch_size,
            self.lr,
            self.lr_min,
            self.seed,
            match self.objective {
                Objective::Gacl => "gacl",
                Objective::NormSoftmax => "softmax",
            },
            self.pseudo_label_period,
            self.standardize_inputs,
            self.unit_norm_inputs,
            self.snapshot_every,
            self.hidden.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
            h.instantiation,
            h.s,
            h.l_q,
            h.u_q,
            h.lambda_g,
            h.class_count,
            h.feature_dim,
        );
        match &self.binning {
            None => out.push_str("binning = off\n"),
            Some(b) => out.push_str(&format!(
                "binning = on\nbinning.initial_cutpoints = {}\nbinning.warmup_epochs = {}\n\
                 binning.final_cutpoints = {}\nbinning.ramp_end_epoch = {}\n\
                 binning.keep_after_ramp = {}\nbinning.relative_tau = {}\n",
                b.initial_cutpoints,
                b.warmup_epochs,
                b.final_cutpoints,
                b.ramp_end_epoch,
                b.keep_after_ramp,
                b.relative_tau
            )),
        }
        out
    }
}

/// Per-column standardisation fitted on the training inputs, optionally
/// followed by scaling each row to unit length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    #[serde(default)]
    pub unit_rows: bool,
}

impl InputNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
            unit_rows: false,
        }
    }

    pub fn with_unit_rows(mut self, on: bool) -> Self {
        self.unit_rows = on;
        self
    }

    pub fn fit(x: &Matrix) -> Self {
        let (n, d) = (x.rows(), x.cols());
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v / n as f64;
            }
        }
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m) / n as f64;
            }
        }
        let scale = var
            .iter()
            .map(|v| if v.sqrt() > 1e-9 { v.sqrt() } else { 1.0 })
            .collect();
        Self {
            mean,
            scale,
            unit_rows: false,
        }
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.mean.len() {
            return Err(invalid(format!(
                "input has {} columns, model expects {}",
                x.cols(),
                self.mean.len()
            )));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
            if self.unit_rows {
                let n = norm(row);
                if n > 1e-300 {
                    row.iter_mut().for_each(|v| *v /= n);
                }
            }
        }
        Ok(out)
    }

    /// Pulls a gradient with respect to the normalised row back to the raw
    /// input row.
    pub fn backward_row(&self, input: &[f64], grad: &[f64]) -> Vec<f64> {
        let mut g = grad.to_vec();
        if self.unit_rows {
            let z: Vec<f64> = input
                .iter()
                .zip(&self.mean)
                .zip(&self.scale)
                .map(|((v, m), s)| (v - m) / s)
                .collect();
            let n = norm(&z);
            if n > 1e-300 {
                let yg = dot(&z, grad) / n;
                for (gi, zi) in g.iter_mut().zip(&z) {
                    *gi = (*gi - zi / n * yg) / n;
                }
            }
        }
        g.iter().zip(&self.scale).map(|(g, s)| g / s).collect()
    }
}

/// Everything needed to score new inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub head: HeadConfig,
    pub objective: Objective,
    pub input_norm: InputNorm,
    pub model: MlpModel,
    pub prototypes: ClassPrototypes,
    pub calibration: QualityCalibration,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub predicted: Vec<usize>,
    /// Normalised quality in `[0, 1]`.
    pub q_norm: Vec<f64>,
    /// Raw feature magnitude `‖f‖`; unclamped, so it keeps the order `q_norm` saturates.
    pub magnitude: Vec<f64>,
    /// Angle to the labelled class prototype.
    pub theta: Vec<f64>,
    /// Largest minus second-largest cosine.
    pub margin: Vec<f64>,
}

impl TrainedModel {
    pub fn input_dim(&self) -> usize {
        self.input_norm.mean.len()
    }

    pub fn embed(&self, inputs: &Matrix) -> Result<Matrix> {
        self.model.forward(&self.input_norm.apply(inputs)?)
    }

    /// Normalised quality of one embedding.
    pub fn q_norm_of(&self, f: &[f64]) -> Result<f64> {
        let q = scale_quality(norm(f), &self.calibration)?.q;
        Ok(self.head.normalize_q(q))
    }

    pub fn score(&self, inputs: &Matrix) -> Result<Vec<f64>> {
        let f = self.embed(inputs)?;
        (0..f.rows()).map(|i| self.q_norm_of(f.row(i))).collect()
    }

    pub fn cosines_of(&self, f: &[f64]) -> Vec<f64> {
        let n = norm(f);
        (0..self.prototypes.class_count())
            .map(|j| {
                let w = self.prototypes.row(j);
                if n > 1e-300 {
                    dot(f, w) / (n * norm(w))
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Unclamped normalised quality `(q_lin − l_q)/(u_q − l_q)` of one raw
    /// input and its gradient with respect to that input. `q_lin` is the
    /// affine scaling without the floor, so the gradient never vanishes.
    pub fn quality_input_grad(&self, input: &[f64]) -> Result<(f64, Vec<f64>)> {
        let x = Matrix::from_vec(1, input.len(), input.to_vec())?;
        let xn = self.input_norm.apply(&x)?;
        let (f, cache) = self.model.forward_cached(&xn)?;
        let stats = self
            .calibration
            .stats()
            .ok_or_else(|| Error::State("quality calibration not initialized".into()))?;
        let (l, u) = (self.head.l_q, self.head.u_q);
        let slope = (u - l) / (6.0 * stats.sigma0);
        let q_raw = norm(f.row(0));
        let q_lin = 0.5 * (l + u) + (q_raw - stats.mu0) * slope;
        let value = (q_lin - l) / (u - l);
        let mut g = Matrix::zeros(1, f.cols());
        if q_raw > 1e-300 {
            for (gi, fi) in g.row_mut(0).iter_mut().zip(f.row(0)) {
                *gi = slope / (u - l) * fi / q_raw;
            }
        }
        let grads = self.model.backward(&cache, &g)?;
        Ok((
            value,
            self.input_norm.backward_row(input, grads.input.row(0)),
        ))
    }

    pub fn evaluate_inputs(&self, inputs: &Matrix, labels: &[usize]) -> Result<Evaluation> {
        if inputs.rows() != labels.len() {
            return Err(invalid("inputs and labels differ in length"));
        }
        let f = self.embed(inputs)?;
        let mut ev = Evaluation {
            accuracy: 0.0,
            predicted: Vec::with_capacity(labels.len()),
            q_norm: Vec::with_capacity(labels.len()),
            magnitude: Vec::with_capacity(labels.len()),
            theta: Vec::with_capacity(labels.len()),
            margin: Vec::with_capacity(labels.len()),
        };
        let mut correct = 0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= self.prototypes.class_count() {
                return Err(invalid(format!("label {y} out of range")));
            }
            let c = self.cosines_of(f.row(i));
            let (pred, top, second) = top_two(&c);
            if pred == y {
                correct += 1;
            }
            ev.predicted.push(pred);
            ev.q_norm.push(self.q_norm_of(f.row(i))?);
            ev.magnitude.push(norm(f.row(i)));
            ev.theta.push(c[y].clamp(-COS_CLAMP, COS_CLAMP).acos());
            ev.margin.push(top - second);
        }
        ev.accuracy = if labels.is_empty() {
            0.0
        } else {
            correct as f64 / labels.len() as f64
        };
        Ok(ev)
    }

    pub fn evaluate(&self, data: &LabeledSet) -> Result<Evaluation> {
        self.evaluate_inputs(&data.inputs(), &data.labels)
    }
}

pub fn evaluate(model: &TrainedModel, data: &LabeledSet) -> Result<Evaluation> {
    model.evaluate(data)
}

fn top_two(c: &[f64]) -> (usize, f64, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    let mut second = f64::NEG_INFINITY;
    for (j, &v) in c.iter().enumerate() {
        if v > best.1 {
            second = best.1;
            best = (j, v);
        } else if v > second {
            second = v;
        }
    }
    (best.0, best.1, if c.len() > 1 { second } else { best.1 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Fraction of training samples (under the labels in use) whose largest
    /// cosine is their label's, accumulated over the epoch.
    pub accuracy: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Active cut points, 0 when binning is off.
    pub cutpoints: usize,
    pub theta_clip_rate: f64,
    pub mean_q_norm: f64,
    pub pseudo_refreshed: bool,
    pub skipped_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub epoch: usize,
    pub q_norm: Vec<f64>,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub lr_trace: Vec<f64>,
    pub snapshots: Vec<Snapshot>,
    /// Labels in use at the end of training (pseudo-labels when clustering).
    pub final_labels: Vec<usize>,
}

pub const TRAIN_LOG_HEADER: &str =
    "epoch,loss,accuracy,lr_start,lr_end,cutpoints,theta_clip_rate,mean_q_norm,pseudo_refreshed,skipped_steps";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRAIN_LOG_HEADER);
        out.push('\n');
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.epoch,
                r.mean_loss,
                r.accuracy,
                r.lr_start,
                r.lr_end,
                r.cutpoints,
                r.theta_clip_rate,
                r.mean_q_norm,
                r.pseudo_refreshed as u8,
                r.skipped_steps
            ));
        }
        out
    }
}

fn unit_rows(f: &Matrix) -> Matrix {
    let mut out = f.clone();
    for i in 0..out.rows() {
        let n = norm(out.row(i));
        if n > 1e-300 {
            out.row_mut(i).iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

fn label_means(x: &Matrix, labels: &[usize], k: usize, fallback: &Matrix) -> Matrix {
    let mut c = Matrix::zeros(k, x.cols());
    let mut counts = vec![0usize; k];
    for (i, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        for (d, v) in c.row_mut(y).iter_mut().zip(x.row(i)) {
            *d += v;
        }
    }
    for j in 0..k {
        if counts[j] == 0 {
            c.row_mut(j).copy_from_slice(fallback.row(j));
        } else {
            c.row_mut(j).iter_mut().for_each(|v| *v /= counts[j] as f64);
        }
    }
    c
}

/// Trains a model. Deterministic for a fixed `config.seed`.
pub fn train(cfg: &TrainConfig, data: &LabeledSet) -> Result<(TrainedModel, TrainLog)> {
    cfg.validate()?;
    data.validate()?;
    if data.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let k = cfg.head.class_count;
    if cfg.pseudo_label_period == 0 && data.class_count != k {
        return Err(config(format!(
            "data has {} classes but the head has {k}",
            data.class_count
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let raw = data.inputs();
    let input_norm = if cfg.standardize_inputs {
        InputNorm::fit(&raw)
    } else {
        InputNorm::identity(raw.cols())
    }
    .with_unit_rows(cfg.unit_norm_inputs);
    let x = input_norm.apply(&raw)?;
    let mut dims = vec![raw.cols()];
    dims.extend_from_slice(&cfg.hidden);
    dims.push(cfg.head.feature_dim);
    let mut model = MlpModel::new(&dims, &mut rng)?;
    let mut protos = ClassPrototypes::random(k, cfg.head.feature_dim, &mut rng);
    let mut calib = QualityCalibration::uninitialized(cfg.head.l_q, cfg.head.u_q);
    let mut opt = OptimizerState::new(0.9, 0.999, 1e-8);

    let clustering_seed: u64 = rng.random();
    let mut centres = None;
    let mut labels = if cfg.pseudo_label_period > 0 {
        let u = unit_rows(&model.forward(&x)?);
        let c = pseudo_label(&u, k, None, clustering_seed)?;
        centres = Some(c.centres);
        c.labels
    } else {
        data.labels.clone()
    };

    let n = x.rows();
    let steps = n.div_ceil(cfg.batch_size);
    let mut log = TrainLog {
        epochs: Vec::with_capacity(cfg.epochs),
        lr_trace: Vec::with_capacity(cfg.epochs * steps),
        snapshots: Vec::new(),
        final_labels: Vec::new(),
    };
    for epoch in 0..cfg.epochs {
        let mut refreshed = false;
        if cfg.pseudo_label_period > 0 && epoch > 0 && epoch % cfg.pseudo_label_period == 0 {
            let u = unit_rows(&model.forward(&x)?);
            let warm = label_means(&u, &labels, k, centres.as_ref().expect("centres set"));
            let c = pseudo_label(&u, k, Some(&warm), clustering_seed)?;
            labels = c.labels;
            centres = Some(c.centres);
            refreshed = true;
        }
        let spec = match (cfg.objective, &cfg.binning) {
            (Objective::Gacl, Some(s)) => s.spec_at(epoch, cfg.head.l_q, cfg.head.u_q)?,
            _ => None,
        };
        let order = shuffled_indices(n, &mut rng);
        let (mut loss_sum, mut correct, mut clipped, mut skipped) = (0.0, 0usize, 0usize, 0usize);
        let mut lr_start = 0.0;
        let mut lr_end = 0.0;
        for b in 0..steps {
            let idx = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(n)];
            let xb = x.select_rows(idx);
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (f, cache) = model.forward_cached(&xb)?;
            if !calib.is_frozen() {
                let mags: Vec<f64> = (0..f.rows()).map(|i| norm(f.row(i))).collect();
                calib.freeze_from(&mags)?;
                debug!("calibration frozen: {:?}", calib.stats());
            }
            let batch = match cfg.objective {
                Objective::Gacl => {
                    head_forward(&f, &protos, &yb, &cfg.head, &calib, spec.as_ref())?
                }
                Objective::NormSoftmax => softmax_forward(&f, &protos, &yb, cfg.head.s)?,
            };
            if !batch.mean_loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss {} at epoch {epoch}, step {b}",
                    batch.mean_loss
                )));
            }
            let (gf, gw) = head_backward(&batch, &f, &protos)?;
            let grads = model.backward(&cache, &gf)?;
            let lr = cosine_warm_restart_lr(b as f64 / steps as f64, cfg.lr, cfg.lr_min)?;
            if b == 0 {
                lr_start = lr;
            }
            lr_end = lr;
            log.lr_trace.push(lr);
            let mut gslices = grads.slices();
            gslices.push(gw.data());
            let outcome = {
                let mut params = model.param_slices_mut();
                params.push(protos.data_mut());
                opt.adam_step(&mut params, &gslices, lr)?
            };
            if outcome == StepOutcome::SkippedNonFinite {
                skipped += 1;
            }
            protos.renormalize();
            loss_sum += batch.mean_loss * idx.len() as f64;
            for o in &batch.outputs {
                let (pred, _, _) = top_two(&o.cosines);
                if pred == o.label {
                    correct += 1;
                }
                if o.theta_clipped {
                    clipped += 1;
                }
            }
        }
        if !model.params_finite() {
            return Err(Error::Divergence(format!(
                "non-finite parameters after epoch {epoch}"
            )));
        }
        let trained = TrainedModel {
            head: cfg.head,
            objective: cfg.objective,
            input_norm: input_norm.clone(),
            model: model.clone(),
            prototypes: protos.clone(),
            calibration: calib,
        };
        let last = epoch + 1 == cfg.epochs;
        let snap = last || (cfg.snapshot_every > 0 && epoch % cfg.snapshot_every == 0);
        let ev = trained.evaluate_inputs(&raw, &labels)?;
        if snap {
            log.snapshots.push(Snapshot {
                epoch,
                q_norm: ev.q_norm.clone(),
                theta: ev.theta.clone(),
            });
        }
        if skipped > 0 {
            warn!("epoch {epoch}: {skipped} optimiser steps skipped");
        }
        log.epochs.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / n as f64,
            accuracy: correct as f64 / n as f64,
            lr_start,
            lr_end,
            cutpoints: spec.as_ref().map_or(0, |s| s.cutpoints().len()),
            theta_clip_rate: clipped as f64 / n as f64,
            mean_q_norm: ev.q_norm.iter().sum::<f64>() / n as f64,
            pseudo_refreshed: refreshed,
            skipped_steps: skipped,
        });
    }
    log.final_labels = labels;
    let trained = TrainedModel {
        head: cfg.head,
        objective: cfg.objective,
        input_norm,
        model,
        prototypes: protos,
        calibration: calib,
    };
    Ok((trained, log))
}

pub const CHECKPOINT_FORMAT: &str = "gacl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    model: TrainedModel,
}

pub fn save_checkpoint<W: Write>(model: &TrainedModel, w: W) -> Result<()> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        model: model.clone(),
    };
    serde_json::to_writer(w, &file)?;
    Ok(())
}

pub fn load_checkpoint<R: Read>(r: R) -> Result<TrainedModel> {
    let file: CheckpointFile = serde_json::from_reader(r)?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!(
            "not a checkpoint: format '{}'",
            file.format
        )));
    }
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            file.version
        )));
    }
    file.model.head.validate()?;
    if !file.model.calibration.is_frozen() {
        return Err(Error::Format(
            "checkpoint has no quality calibration".into(),
        ));
    }
    Ok(file.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_gaussians, Arrangement, GaussianMixtureSpec};
    use crate::gradcheck::{central_difference, rel_err};

    fn toy_config() -> TrainConfig {
        let mut cfg = TrainConfig::new(HeadConfig::preset(Instantiation::Cosine, 9, 9));
        cfg.batch_size = 64;
        cfg.hidden = vec![32, 32];
        cfg
    }

    #[test]
    fn circle_toy_reaches_high_accuracy() {
        let data = gen_gaussians(&GaussianMixtureSpec::nine(Arrangement::Circle, 100, 1)).unwrap();
        let (model, log) = train(&toy_config(), &data).unwrap();
        assert_eq!(log.epochs.len(), 20);
        let ev = model.evaluate(&data).unwrap();
        assert!(ev.accuracy >= 0.99, "{}", ev.accuracy);
        assert!(model.prototypes.max_norm_deviation() < 1e-9);
        assert_eq!(log.epochs[0].cutpoints, 5);
        assert_eq!(log.epochs[19].cutpoints, 20);
    }

    #[test]
    fn training_is_deterministic() {
        let data = gen_gaussians(&GaussianMixtureSpec::nine(Arrangement::Grid, 20, 2)).unwrap();
        let mut cfg = toy_config();
        cfg.epochs = 3;
        let (m1, l1) = train(&cfg, &data).unwrap();
        let (m2, l2) = train(&cfg, &data).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(m1, m2);
        assert_eq!(l1.to_csv(), l2.to_csv());
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let data = gen_gaussians(&GaussianMixtureSpec::nine(Arrangement::Circle, 200, 3)).unwrap();
        let mut accs = Vec::new();
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let head = HeadConfig::preset(Instantiation::Cosine, 9, 9);
            let model = MlpModel::new(&[2, 32, 9], &mut rng).unwrap();
            let prototypes = ClassPrototypes::random(9, 9, &mut rng);
            let m = TrainedModel {
                head,
                objective: Objective::Gacl,
                input_norm: InputNorm::identity(2),
                model,
                prototypes,
                calibration: QualityCalibration::with_stats(0.35, 0.8, 1.0, 0.5).unwrap(),
            };
            accs.push(m.evaluate(&data).unwrap().accuracy);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 1.0 / 9.0).abs() < 0.05, "{mean}");
    }

    #[test]
    fn perfect_embedding_scores() {
        // Inputs are the prototypes themselves through an identity network.
        let head = HeadConfig::preset(Instantiation::Cosine, 3, 3);
        let layer = crate::engine::Dense {
            weights: Matrix::identity(3),
            biases: vec![0.0; 3],
            activation: crate::engine::Activation::Linear,
        };
        let m = TrainedModel {
            head,
            objective: Objective::Gacl,
            input_norm: InputNorm::identity(3),
            model: MlpModel::from_layers(vec![layer]).unwrap(),
            prototypes: ClassPrototypes::from_matrix(Matrix::identity(3)).unwrap(),
            calibration: QualityCalibration::with_stats(0.35, 0.8, 2.0, 0.5).unwrap(),
        };
        let x = Matrix::from_rows(&[
            vec![2.0, 0.0, 0.0],
            vec![0.0, 2.0, 0.0],
            vec![0.0, 0.0, 2.0],
        ])
        .unwrap();
        let ev = m.evaluate_inputs(&x, &[0, 1, 2]).unwrap();
        assert_eq!(ev.accuracy, 1.0);
        assert!(ev.theta.iter().all(|t| t.abs() < 1e-3));
        // Magnitude at the calibration mean maps to the middle of the range.
        assert!(ev.q_norm.iter().all(|q| (q - 0.5).abs() < 1e-12));
    }

    #[test]
    fn quality_input_grad_matches_finite_difference() {
        let data = gen_gaussians(&GaussianMixtureSpec::nine(Arrangement::Circle, 20, 4)).unwrap();
        for unit in [false, true] {
            let mut cfg = toy_config();
            cfg.epochs = 2;
            cfg.unit_norm_inputs = unit;
            let (m, _) = train(&cfg, &data).unwrap();
            assert_eq!(m.input_norm.unit_rows, unit);
            for x in [[0.3, -0.2], [1.0, 0.1], [-0.7, 0.6]] {
                let (_, g) = m.quality_input_grad(&x).unwrap();
                for d in 0..2 {
                    let num = central_difference(
                        |v| {
                            let mut p = x;
                            p[d] = v;
                            m.quality_input_grad(&p).unwrap().0
                        },
                        x[d],
                        1e-6,
                    );
                    assert!(rel_err(g[d], num, 1e-6) < 1e-6);
                }
            }
        }
    }

    #[test]
    fn config_validation_and_kv() {
        let mut cfg = toy_config();
        cfg.epochs = 0;
        assert!(train(
            &cfg,
            &gen_gaussians(&GaussianMixtureSpec::nine(Arrangement::Grid, 2, 0)).unwrap()
        )
        .is_err());
        let mut cfg = toy_config();
        cfg.head.lambda_g = 0.01;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = TrainConfig::new(HeadConfig::preset(Instantiation::Cosine, 9, 9));
        cfg.apply_kv(
            "# comment\nepochs = 7\nlambda_g = 2.0\npreset = mul\nhidden = 8, 4\nbinning = off\n",
        )
        .unwrap();
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.head.instantiation, Instantiation::MulAngular);
        assert_eq!(cfg.head.lambda_g, 2.0);
        assert_eq!(cfg.hidden, vec![8, 4]);
        assert!(cfg.binning.is_none());
        let mut back = TrainConfig::new(HeadConfig::preset(Instantiation::Scale, 2, 2));
        back.apply_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        assert!(cfg.apply_kv("nonsense = 1").is_err());
        assert!(cfg.apply_kv("epochs").is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let data = gen_gaussians(&GaussianMixtureSpec::nine(Arrangement::Grid, 10, 6)).unwrap();
        let mut cfg = toy_config();
        cfg.epochs = 1;
        let (m, _) = train(&cfg, &data).unwrap();
        let mut buf = Vec::new();
        save_checkpoint(&m, &mut buf).unwrap();
        let back = load_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, m);
        let text = String::from_utf8(buf)
            .unwrap()
            .replace("\"version\":1", "\"version\":9");
        assert!(load_checkpoint(text.as_bytes()).is_err());
    }

    #[test]
    fn pseudo_label_training_runs() {
        let data = gen_gaussians(&GaussianMixtureSpec::nine(Arrangement::Circle, 30, 8)).unwrap();
        let mut cfg = toy_config();
        cfg.epochs = 5;
        cfg.pseudo_label_period = 2;
        let (_, log) = train(&cfg, &data).unwrap();
        let refreshed: Vec<bool> = log.epochs.iter().map(|e| e.pseudo_refreshed).collect();
        assert_eq!(refreshed, vec![false, false, true, false, true]);
        assert_eq!(log.final_labels.len(), data.len());
    }
}
