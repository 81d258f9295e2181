//! Quality-guided generation: a small VAE whose decoder emits one Gaussian
//! mixture per output point, Gumbel straight-through sampling, and gradient
//! ascent on the scorer's quality in latent space.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::shuffled_indices;
use crate::engine::{norm, Matrix, MlpModel, OptimizerState, StepOutcome};
use crate::error::{config, invalid, Error, Result};
use crate::gradcheck::{central_difference, rel_err};
use crate::sketch::{resample, sketch_features, sketch_features_backward, Point, SketchSequence};
use crate::trainer::TrainedModel;

pub const STEPS: usize = 32;
pub const COMPONENTS: usize = 3;
pub const LATENT_DIM: usize = 8;
/// Decoded points are split into this many equal strokes.
pub const OUTPUT_STROKES: usize = 4;
/// Logits, means and log-scales of one component.
const PER_COMPONENT: usize = 5;
const LOG_SCALE_MIN: f64 = -5.8;
const LOG_SCALE_MAX: f64 = -0.7;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mixture parameters for one output point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmStepParams {
    pub logits: Vec<f64>,
    pub means: Vec<Point>,
    /// Natural log of the per-axis standard deviations.
    pub log_scales: Vec<[f64; 2]>,
}

impl GmmStepParams {
    pub fn validate(&self) -> Result<()> {
        let m = self.logits.len();
        if m < 2 || self.means.len() != m || self.log_scales.len() != m {
            return Err(invalid("a mixture step needs M ≥ 2 components of each kind"));
        }
        let finite = self.logits.iter().all(|v| v.is_finite())
            && self.means.iter().flatten().all(|v| v.is_finite())
            && self.log_scales.iter().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(invalid("mixture parameters must be finite"));
        }
        Ok(())
    }

    pub fn components(&self) -> usize {
        self.logits.len()
    }

    pub fn scale(&self, k: usize) -> [f64; 2] {
        [self.log_scales[k][0].exp(), self.log_scales[k][1].exp()]
    }

    pub fn probabilities(&self) -> Vec<f64> {
        softmax(&self.logits, 1.0)
    }
}

/// Splits a raw decoder row into `T` steps of `M` components. Each block is
/// `[logits; M][mean x, y; M][raw log-scale x, y; M]`; raw log-scales are
/// squashed into a bounded interval by a sigmoid.
pub fn params_from_raw(raw: &[f64], components: usize) -> Result<Vec<GmmStepParams>> {
    let block = components * PER_COMPONENT;
    if components < 2 || raw.is_empty() || raw.len() % block != 0 {
        return Err(invalid("decoder output does not split into mixture blocks"));
    }
    let m = components;
    Ok(raw
        .chunks(block)
        .map(|b| GmmStepParams {
            logits: b[..m].to_vec(),
            means: (0..m).map(|k| [b[m + 2 * k], b[m + 2 * k + 1]]).collect(),
            log_scales: (0..m)
                .map(|k| {
                    let squash =
                        |r: f64| LOG_SCALE_MIN + (LOG_SCALE_MAX - LOG_SCALE_MIN) * sigmoid(r);
                    [squash(b[3 * m + 2 * k]), squash(b[3 * m + 2 * k + 1])]
                })
                .collect(),
        })
        .collect())
}

/// Chain rule through [`params_from_raw`]: gradients with respect to the
/// parameter structs become gradients with respect to the raw row.
fn raw_grad(params: &[GmmStepParams], grads: &[GmmStepParams]) -> Vec<f64> {
    let m = params[0].components();
    let mut out = Vec::with_capacity(params.len() * m * PER_COMPONENT);
    for (p, g) in params.iter().zip(grads) {
        out.extend_from_slice(&g.logits);
        for k in 0..m {
            out.extend_from_slice(&g.means[k]);
        }
        for k in 0..m {
            for d in 0..2 {
                let s = (p.log_scales[k][d] - LOG_SCALE_MIN) / (LOG_SCALE_MAX - LOG_SCALE_MIN);
                out.push(g.log_scales[k][d] * (LOG_SCALE_MAX - LOG_SCALE_MIN) * s * (1.0 - s));
            }
        }
    }
    out
}

fn zero_like(p: &GmmStepParams) -> GmmStepParams {
    let m = p.components();
    GmmStepParams {
        logits: vec![0.0; m],
        means: vec![[0.0; 2]; m],
        log_scales: vec![[0.0; 2]; m],
    }
}

fn softmax(x: &[f64], tau: f64) -> Vec<f64> {
    let mx = x.iter().map(|v| v / tau).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v / tau - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Gumbel(0, 1) draws via `−ln(−ln u)` with `u` strictly inside (0, 1).
pub fn gumbel_noise<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Vec<f64> {
    (0..m)
        .map(|_| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

/// A straight-through categorical draw: the forward value is `hard`, the
/// backward pass differentiates `soft`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StSample {
    pub index: usize,
    pub hard: Vec<f64>,
    pub soft: Vec<f64>,
    pub tau: f64,
}

impl StSample {
    /// Gradient with respect to the logits given a gradient with respect to
    /// the sample: `J_softᵀ g` with `J_soft = (diag(y) − y yᵀ)/τ`.
    pub fn backward(&self, grad_y: &[f64]) -> Vec<f64> {
        let yg: f64 = self.soft.iter().zip(grad_y).map(|(y, g)| y * g).sum();
        self.soft
            .iter()
            .zip(grad_y)
            .map(|(y, g)| y * (g - yg) / self.tau)
            .collect()
    }
}

pub fn gumbel_st_with_noise(logits: &[f64], tau: f64, gumbel: &[f64]) -> Result<StSample> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(invalid(format!("temperature must be positive, got {tau}")));
    }
    if logits.is_empty() || logits.len() != gumbel.len() {
        return Err(invalid("logits and noise must be non-empty and the same length"));
    }
    let perturbed: Vec<f64> = logits.iter().zip(gumbel).map(|(l, g)| l + g).collect();
    let soft = softmax(&perturbed, tau);
    let index = perturbed
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0;
    let mut hard = vec![0.0; logits.len()];
    hard[index] = 1.0;
    Ok(StSample {
        index,
        hard,
        soft,
        tau,
    })
}

pub fn gumbel_st_sample(logits: &[f64], tau: f64, noise_seed: u64) -> Result<StSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let g = gumbel_noise(logits.len(), &mut rng);
    gumbel_st_with_noise(logits, tau, &g)
}

/// Gumbel and Gaussian draws for a whole sequence, so a sample can be
/// replayed exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceNoise {
    pub gumbel: Vec<Vec<f64>>,
    pub normal: Vec<[f64; 2]>,
}

impl SequenceNoise {
    pub fn draw(steps: usize, components: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gumbel = Vec::with_capacity(steps);
        let mut normal = Vec::with_capacity(steps);
        for _ in 0..steps {
            gumbel.push(gumbel_noise(components, &mut rng));
            normal.push([rng.sample(StandardNormal), rng.sample(StandardNormal)]);
        }
        Self { gumbel, normal }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledSequence {
    pub points: Vec<Point>,
    pub selections: Vec<StSample>,
}

/// Per step: pick a component by straight-through Gumbel, then emit
/// `mean + scale ⊙ ε`. The point is `Σ_k y_k (μ_k + σ_k ⊙ ε)` with `y` the
/// straight-through sample.
pub fn sample_with_noise(
    params: &[GmmStepParams],
    tau: f64,
    noise: &SequenceNoise,
) -> Result<SampledSequence> {
    if noise.gumbel.len() != params.len() || noise.normal.len() != params.len() {
        return Err(invalid("noise does not match the sequence length"));
    }
    let mut points = Vec::with_capacity(params.len());
    let mut selections = Vec::with_capacity(params.len());
    for (t, p) in params.iter().enumerate() {
        p.validate()?;
        let sel = gumbel_st_with_noise(&p.logits, tau, &noise.gumbel[t])?;
        points.push(mix_point(p, &sel.hard, noise.normal[t]));
        selections.push(sel);
    }
    Ok(SampledSequence { points, selections })
}

pub fn sample_sequence(params: &[GmmStepParams], tau: f64, seed: u64) -> Result<SampledSequence> {
    let m = params.first().map_or(0, GmmStepParams::components);
    sample_with_noise(params, tau, &SequenceNoise::draw(params.len(), m, seed))
}

fn mix_point(p: &GmmStepParams, y: &[f64], eps: [f64; 2]) -> Point {
    let mut out = [0.0; 2];
    for (k, &w) in y.iter().enumerate() {
        let s = p.scale(k);
        for d in 0..2 {
            out[d] += w * (p.means[k][d] + s[d] * eps[d]);
        }
    }
    out
}

/// Straight-through backward pass of [`sample_with_noise`]. Means and scales
/// receive the gradient weighted by the forward (hard) selection; logits
/// receive it through the soft relaxation.
pub fn sample_backward(
    params: &[GmmStepParams],
    sampled: &SampledSequence,
    noise: &SequenceNoise,
    grad_points: &[Point],
) -> Result<Vec<GmmStepParams>> {
    if grad_points.len() != params.len() || sampled.selections.len() != params.len() {
        return Err(invalid("gradient does not match the sequence length"));
    }
    let mut out = Vec::with_capacity(params.len());
    for (t, p) in params.iter().enumerate() {
        let sel = &sampled.selections[t];
        let g = grad_points[t];
        let eps = noise.normal[t];
        let mut gp = zero_like(p);
        let mut grad_y = vec![0.0; p.components()];
        for k in 0..p.components() {
            let s = p.scale(k);
            let w = sel.hard[k];
            for d in 0..2 {
                let comp = p.means[k][d] + s[d] * eps[d];
                grad_y[k] += g[d] * comp;
                gp.means[k][d] = w * g[d];
                gp.log_scales[k][d] = w * g[d] * s[d] * eps[d];
            }
        }
        gp.logits = sel.backward(&grad_y);
        out.push(gp);
    }
    Ok(out)
}

/// Differentiable stand-in with the same forward value and gradient as the
/// straight-through sample at the point where `frozen` was drawn:
/// `y = y_soft(logits) + (y_hard − y_soft)|frozen`. Used to check
/// [`sample_backward`] by finite differences.
pub fn st_surrogate_points(
    params: &[GmmStepParams],
    frozen: &SampledSequence,
    noise: &SequenceNoise,
) -> Result<Vec<Point>> {
    if frozen.selections.len() != params.len() || noise.normal.len() != params.len() {
        return Err(invalid("frozen sample does not match the sequence length"));
    }
    Ok(params
        .iter()
        .enumerate()
        .map(|(t, p)| {
            let base = &frozen.selections[t];
            let perturbed: Vec<f64> =
                p.logits.iter().zip(&noise.gumbel[t]).map(|(l, g)| l + g).collect();
            let soft = softmax(&perturbed, base.tau);
            let y: Vec<f64> = soft
                .iter()
                .zip(base.hard.iter().zip(&base.soft))
                .map(|(s, (h, s0))| s + (h - s0))
                .collect();
            mix_point(p, &y, noise.normal[t])
        })
        .collect())
}

/// Cuts a point sequence into [`OUTPUT_STROKES`] consecutive strokes.
pub fn points_to_strokes(points: &[Point]) -> Vec<Vec<Point>> {
    let per = points.len().div_ceil(OUTPUT_STROKES).max(2);
    points.chunks(per).map(<[Point]>::to_vec).collect()
}

fn strokes_to_points(strokes: Vec<Vec<Point>>) -> Vec<Point> {
    strokes.into_iter().flatten().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden: usize,
    pub kl_weight: f64,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            hidden: 128,
            kl_weight: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeEpoch {
    pub epoch: usize,
    /// Mean per-sketch negative log-likelihood.
    pub nll: f64,
    pub kl: f64,
    pub objective: f64,
}

/// Point-set encoder (32 resampled points → latent mean and log-variance)
/// and a feed-forward decoder emitting every mixture step at once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyVae {
    pub encoder: MlpModel,
    pub decoder: MlpModel,
    pub steps: usize,
    pub components: usize,
    pub latent_dim: usize,
}

fn encoder_input(sketch: &SketchSequence) -> Result<Vec<f64>> {
    Ok(resample(sketch, STEPS)?
        .into_iter()
        .flat_map(|p| [p[0] - 0.5, p[1] - 0.5])
        .collect())
}

impl ToyVae {
    pub fn new<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Result<Self> {
        let encoder = MlpModel::new(&[2 * STEPS, hidden, hidden, 2 * LATENT_DIM], rng)?;
        let decoder = MlpModel::new(
            &[LATENT_DIM, hidden, hidden, STEPS * COMPONENTS * PER_COMPONENT],
            rng,
        )?;
        Ok(Self {
            encoder,
            decoder,
            steps: STEPS,
            components: COMPONENTS,
            latent_dim: LATENT_DIM,
        })
    }

    /// Posterior mean and log-variance.
    pub fn encode(&self, sketch: &SketchSequence) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = encoder_input(sketch)?;
        let out = self.encoder.forward(&Matrix::from_vec(1, x.len(), x)?)?;
        let r = out.row(0);
        Ok((r[..self.latent_dim].to_vec(), r[self.latent_dim..].to_vec()))
    }

    pub fn decode_params(&self, z: &[f64]) -> Result<Vec<GmmStepParams>> {
        self.check_latent(z)?;
        let raw = self.decoder.forward(&Matrix::from_vec(1, z.len(), z.to_vec())?)?;
        params_from_raw(raw.row(0), self.components)
    }

    /// Decoded strokes for one latent code and fixed noise. Coordinates are
    /// not clamped.
    pub fn decode(&self, z: &[f64], tau: f64, noise: &SequenceNoise) -> Result<Vec<Vec<Point>>> {
        let s = sample_with_noise(&self.decode_params(z)?, tau, noise)?;
        Ok(points_to_strokes(&s.points))
    }

    fn check_latent(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.latent_dim {
            return Err(invalid(format!(
                "latent code has {} entries, expected {}",
                z.len(),
                self.latent_dim
            )));
        }
        Ok(())
    }
}

/// Negative log-likelihood of targets under the mixture steps and its
/// gradient with respect to the parameters.
fn gmm_nll(params: &[GmmStepParams], targets: &[Point]) -> (f64, Vec<GmmStepParams>) {
    let mut nll = 0.0;
    let mut grads = Vec::with_capacity(params.len());
    for (p, x) in params.iter().zip(targets) {
        let pi = p.probabilities();
        let logs: Vec<f64> = (0..p.components())
            .map(|k| {
                let s = p.scale(k);
                let zx = (x[0] - p.means[k][0]) / s[0];
                let zy = (x[1] - p.means[k][1]) / s[1];
                pi[k].ln()
                    - (2.0 * std::f64::consts::PI).ln()
                    - p.log_scales[k][0]
                    - p.log_scales[k][1]
                    - 0.5 * (zx * zx + zy * zy)
            })
            .collect();
        let mx = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + logs.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
        nll -= lse;
        let mut g = zero_like(p);
        for k in 0..p.components() {
            let r = (logs[k] - lse).exp();
            let s = p.scale(k);
            g.logits[k] = pi[k] - r;
            for d in 0..2 {
                let z = (x[d] - p.means[k][d]) / s[d];
                g.means[k][d] = -r * z / s[d];
                g.log_scales[k][d] = r * (1.0 - z * z);
            }
        }
        grads.push(g);
    }
    (nll, grads)
}

/// Trains on the sketches' resampled point sequences with the objective
/// mixture NLL + `kl_weight`·KL(q(z|x) ‖ N(0, I)).
pub fn train_vae(cfg: &VaeConfig, sketches: &[SketchSequence]) -> Result<(ToyVae, Vec<VaeEpoch>)> {
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.hidden == 0 {
        return Err(config("VAE epochs, batch size and width must be positive"));
    }
    if !(cfg.lr > 0.0) || !(cfg.kl_weight >= 0.0) {
        return Err(config("VAE needs lr > 0 and kl_weight ≥ 0"));
    }
    if sketches.is_empty() {
        return Err(invalid("no sketches to train on"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut vae = ToyVae::new(cfg.hidden, &mut rng)?;
    let inputs: Vec<Vec<f64>> = sketches.iter().map(encoder_input).collect::<Result<_>>()?;
    let targets: Vec<Vec<Point>> = inputs
        .iter()
        .map(|x| x.chunks(2).map(|c| [c[0] + 0.5, c[1] + 0.5]).collect())
        .collect();
    let (mut opt_e, mut opt_d) = (OptimizerState::default(), OptimizerState::default());
    let ld = vae.latent_dim;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = shuffled_indices(sketches.len(), &mut rng);
        let (mut nll_sum, mut kl_sum) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let x = Matrix::from_rows(&chunk.iter().map(|&i| inputs[i].clone()).collect::<Vec<_>>())?;
            let (enc, enc_cache) = vae.encoder.forward_cached(&x)?;
            let mut z = Matrix::zeros(b, ld);
            let mut eps = Matrix::zeros(b, ld);
            for r in 0..b {
                for j in 0..ld {
                    let e: f64 = rng.sample(StandardNormal);
                    eps.set(r, j, e);
                    let lv = enc.get(r, ld + j);
                    z.set(r, j, enc.get(r, j) + (0.5 * lv).exp() * e);
                }
            }
            let (dec, dec_cache) = vae.decoder.forward_cached(&z)?;
            let mut g_dec = Matrix::zeros(b, dec.cols());
            for (r, &i) in chunk.iter().enumerate() {
                let params = params_from_raw(dec.row(r), vae.components)?;
                let (nll, grads) = gmm_nll(&params, &targets[i]);
                nll_sum += nll;
                for (gv, v) in g_dec.row_mut(r).iter_mut().zip(raw_grad(&params, &grads)) {
                    *gv = v / b as f64;
                }
                for j in 0..ld {
                    let (mu, lv) = (enc.get(r, j), enc.get(r, ld + j));
                    kl_sum += 0.5 * (mu * mu + lv.exp() - 1.0 - lv);
                }
            }
            let gd = vae.decoder.backward(&dec_cache, &g_dec)?;
            let mut g_enc = Matrix::zeros(b, 2 * ld);
            for r in 0..b {
                for j in 0..ld {
                    let gz = gd.input.get(r, j);
                    let (mu, lv) = (enc.get(r, j), enc.get(r, ld + j));
                    let w = cfg.kl_weight / b as f64;
                    g_enc.set(r, j, gz + w * mu);
                    g_enc.set(
                        r,
                        ld + j,
                        gz * 0.5 * (0.5 * lv).exp() * eps.get(r, j) + w * 0.5 * (lv.exp() - 1.0),
                    );
                }
            }
            let ge = vae.encoder.backward(&enc_cache, &g_enc)?;
            let skipped_d = opt_d.adam_step(&mut vae.decoder.param_slices_mut(), &gd.slices(), cfg.lr)?;
            let skipped_e = opt_e.adam_step(&mut vae.encoder.param_slices_mut(), &ge.slices(), cfg.lr)?;
            if skipped_d != StepOutcome::Applied || skipped_e != StepOutcome::Applied {
                return Err(Error::Divergence(format!("non-finite VAE gradient in epoch {epoch}")));
            }
        }
        let n = sketches.len() as f64;
        let rec = VaeEpoch {
            epoch,
            nll: nll_sum / n,
            kl: kl_sum / n,
            objective: (nll_sum + cfg.kl_weight * kl_sum) / n,
        };
        if !rec.objective.is_finite() {
            return Err(Error::Divergence(format!("non-finite VAE objective in epoch {epoch}")));
        }
        log::debug!("vae epoch {epoch}: nll {:.3} kl {:.3}", rec.nll, rec.kl);
        history.push(rec);
    }
    Ok((vae, history))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteerParams {
    pub alpha: f64,
    /// Step size λ.
    pub lambda: f64,
    pub q_max: f64,
    pub tau: f64,
    pub iters: usize,
    pub checkpoint_every: usize,
}

impl Default for SteerParams {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            lambda: 0.01,
            q_max: 1.0,
            tau: 1.0,
            iters: 200,
            checkpoint_every: 50,
        }
    }
}

impl SteerParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.lambda >= 0.0) || !(self.tau > 0.0) {
            return Err(config("steering needs α ≥ 0, λ ≥ 0 and τ > 0"));
        }
        if self.checkpoint_every == 0 {
            return Err(config("checkpoint stride must be positive"));
        }
        Ok(())
    }
}

/// `L = q_max − q_lin + α‖z − z0‖²` at one latent code. `q_lin` is the
/// scorer's unclamped normalised quality of the decoded sketch and `q_norm`
/// its clamp to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentObjective {
    pub value: f64,
    pub q_lin: f64,
    pub q_norm: f64,
    pub grad: Vec<f64>,
}

fn latent_forward(
    scorer: &TrainedModel,
    z: &[f64],
    z0: &[f64],
    params: &SteerParams,
    points: &[Point],
) -> Result<(f64, f64, Vec<f64>, Vec<Vec<Point>>)> {
    let strokes = points_to_strokes(points);
    let (q_lin, g_feat) = scorer.quality_input_grad(&sketch_features(&strokes))?;
    let pull: f64 = z.iter().zip(z0).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((params.q_max - q_lin + params.alpha * pull, q_lin, g_feat, strokes))
}

pub fn latent_objective(
    vae: &ToyVae,
    scorer: &TrainedModel,
    z: &[f64],
    z0: &[f64],
    params: &SteerParams,
    noise: &SequenceNoise,
) -> Result<LatentObjective> {
    vae.check_latent(z)?;
    vae.check_latent(z0)?;
    let zm = Matrix::from_vec(1, z.len(), z.to_vec())?;
    let (raw, cache) = vae.decoder.forward_cached(&zm)?;
    let gmm = params_from_raw(raw.row(0), vae.components)?;
    let sampled = sample_with_noise(&gmm, params.tau, noise)?;
    let (value, q_lin, g_feat, strokes) = latent_forward(scorer, z, z0, params, &sampled.points)?;
    // dL/dfeatures = −dq/dfeatures.
    let g_feat: Vec<f64> = g_feat.iter().map(|g| -g).collect();
    let g_points = strokes_to_points(sketch_features_backward(&strokes, &g_feat)?);
    let g_params = sample_backward(&gmm, &sampled, noise, &g_points)?;
    let g_raw = raw_grad(&gmm, &g_params);
    let gd = vae
        .decoder
        .backward(&cache, &Matrix::from_vec(1, g_raw.len(), g_raw)?)?;
    let grad = gd
        .input
        .row(0)
        .iter()
        .zip(z.iter().zip(z0))
        .map(|(g, (a, b))| g + 2.0 * params.alpha * (a - b))
        .collect();
    Ok(LatentObjective {
        value,
        q_lin,
        q_norm: q_lin.clamp(0.0, 1.0),
        grad,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Applied,
    SkippedNonFinite,
}

/// One update `z ← z − λ ∇_z L`. With λ = 0 the input is returned unchanged;
/// a non-finite gradient leaves `z` unchanged and is reported.
pub fn latent_step(
    vae: &ToyVae,
    scorer: &TrainedModel,
    z: &[f64],
    z0: &[f64],
    params: &SteerParams,
    noise: &SequenceNoise,
) -> Result<(Vec<f64>, StepStatus, LatentObjective)> {
    params.validate()?;
    let obj = latent_objective(vae, scorer, z, z0, params, noise)?;
    if obj.grad.iter().any(|g| !g.is_finite()) {
        log::warn!("steer: non-finite latent gradient, step skipped");
        return Ok((z.to_vec(), StepStatus::SkippedNonFinite, obj));
    }
    if params.lambda == 0.0 {
        return Ok((z.to_vec(), StepStatus::Applied, obj));
    }
    let next = z
        .iter()
        .zip(&obj.grad)
        .map(|(v, g)| v - params.lambda * g)
        .collect();
    Ok((next, StepStatus::Applied, obj))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub z: Vec<f64>,
    pub q_norm: f64,
    pub objective: f64,
    /// Decoded strokes clamped to the unit square.
    pub strokes: Vec<Vec<Point>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
    pub skipped_steps: usize,
}

impl Trajectory {
    pub fn first(&self) -> &TrajectoryPoint {
        &self.points[0]
    }

    pub fn last(&self) -> &TrajectoryPoint {
        &self.points[self.points.len() - 1]
    }
}

/// Runs `iters` latent steps from `z0` with one fixed noise draw, recording
/// the start, every `checkpoint_every`-th step and the final step.
pub fn steer(
    vae: &ToyVae,
    scorer: &TrainedModel,
    z0: &[f64],
    params: &SteerParams,
    noise: &SequenceNoise,
) -> Result<Trajectory> {
    params.validate()?;
    let clamped = |strokes: Vec<Vec<Point>>| -> Vec<Vec<Point>> {
        strokes
            .into_iter()
            .map(|s| s.into_iter().map(|p| [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]).collect())
            .collect()
    };
    let record = |step: usize, z: &[f64], obj: &LatentObjective| -> Result<TrajectoryPoint> {
        Ok(TrajectoryPoint {
            step,
            z: z.to_vec(),
            q_norm: obj.q_norm,
            objective: obj.value,
            strokes: clamped(vae.decode(z, params.tau, noise)?),
        })
    };
    let mut z = z0.to_vec();
    let mut out = Trajectory {
        points: Vec::new(),
        skipped_steps: 0,
    };
    for step in 0..params.iters {
        let (next, status, obj) = latent_step(vae, scorer, &z, z0, params, noise)?;
        if step % params.checkpoint_every == 0 {
            out.points.push(record(step, &z, &obj)?);
        }
        if status == StepStatus::SkippedNonFinite {
            out.skipped_steps += 1;
        }
        z = next;
    }
    let obj = latent_objective(vae, scorer, &z, z0, params, noise)?;
    if out.points.last().is_none_or(|p| p.step != params.iters) {
        out.points.push(record(params.iters, &z, &obj)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteerGradCheck {
    pub max_rel_err: f64,
    pub entries: usize,
}

/// Compares `∇_z L` against central differences of the straight-through
/// surrogate objective with the noise and the hard selections frozen at `z`.
pub fn steering_grad_check(
    vae: &ToyVae,
    scorer: &TrainedModel,
    z: &[f64],
    z0: &[f64],
    params: &SteerParams,
    noise: &SequenceNoise,
    h: f64,
) -> Result<SteerGradCheck> {
    let obj = latent_objective(vae, scorer, z, z0, params, noise)?;
    let frozen = sample_with_noise(&vae.decode_params(z)?, params.tau, noise)?;
    let eval = |zz: &[f64]| -> Result<f64> {
        let gmm = vae.decode_params(zz)?;
        let pts = st_surrogate_points(&gmm, &frozen, noise)?;
        Ok(latent_forward(scorer, zz, z0, params, &pts)?.0)
    };
    let mut worst: f64 = 0.0;
    let mut failure = None;
    for j in 0..z.len() {
        let num = central_difference(
            |v| {
                let mut zz = z.to_vec();
                zz[j] = v;
                eval(&zz).unwrap_or_else(|e| {
                    failure = Some(e.to_string());
                    f64::NAN
                })
            },
            z[j],
            h,
        );
        let scale = 1e-6 * norm(&obj.grad).max(1.0);
        worst = worst.max(rel_err(obj.grad[j], num, scale));
    }
    if let Some(msg) = failure {
        return Err(Error::State(msg));
    }
    Ok(SteerGradCheck {
        max_rel_err: worst,
        entries: z.len(),
    })
}
