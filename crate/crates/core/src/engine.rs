//! Deterministic numerical core: dense row-major matrices, a small MLP with
//! hand-written backward pass, Adam, and the per-epoch cosine warm-restart
//! learning-rate schedule.
//!
//! Everything here is `f64` and single-threaded so that identical seeds give
//! bit-identical results.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("matrix entries must be finite"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(invalid("ragged rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copies the given rows (in order) into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (k, &i) in idx.iter().enumerate() {
            out.row_mut(k).copy_from_slice(self.row(i));
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(invalid(format!(
                "matmul shape mismatch: {}x{} · {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = other.row(k);
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`, without materialising the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(invalid("t_matmul shape mismatch"));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for n in 0..self.rows {
            let a_row = self.row(n);
            let b_row = other.row(n);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(invalid("matmul_t shape mismatch"));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a_row, other.row(j));
            }
        }
        Ok(out)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Linear,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    #[inline]
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Linear => 1.0,
        }
    }
}

/// One affine layer. `weights` has shape `(in_dim, out_dim)` so a batch maps
/// as `X · W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Matrix,
    pub biases: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    layers: Vec<Dense>,
}

/// Activations recorded by [`MlpModel::forward_cached`]; `inputs[k]` is the
/// input to layer `k`, `pre[k]` its pre-activation and `outputs[k]` its output.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    outputs: Vec<Matrix>,
}

impl ForwardCache {
    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Parameter gradients, laid out exactly like the model's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    /// Gradient with respect to the batch that was fed forward.
    pub input: Matrix,
}

impl MlpGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.weights.len() * 2);
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.data());
            out.push(b.as_slice());
        }
        out
    }
}

impl MlpModel {
    /// Fan-in scaled uniform initialisation, ReLU hidden layers and a linear
    /// output layer.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        Self::with_activation(dims, Activation::Relu, rng)
    }

    pub fn with_activation<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(invalid("an MLP needs at least input and output dims"));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(invalid("layer dims must be > 0"));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|k| {
                let (fan_in, fan_out) = (dims[k], dims[k + 1]);
                let limit = (6.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect();
                Dense {
                    weights: Matrix {
                        rows: fan_in,
                        cols: fan_out,
                        data,
                    },
                    biases: vec![0.0; fan_out],
                    activation: if k + 1 == n {
                        Activation::Linear
                    } else {
                        hidden
                    },
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid("an MLP needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(invalid("consecutive layer dims disagree"));
            }
        }
        for l in &layers {
            if l.biases.len() != l.out_dim() {
                return Err(invalid("bias length does not match layer width"));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].in_dim()];
        dims.extend(self.layers.iter().map(Dense::out_dim));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.data().len() + l.biases.len())
            .sum()
    }

    /// Mutable views of every parameter block, ordered like [`MlpGrads::slices`].
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &mut self.layers {
            out.push(l.weights.data_mut());
            out.push(l.biases.as_mut_slice());
        }
        out
    }

    pub fn params_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.all_finite() && l.biases.iter().all(|b| b.is_finite()))
    }

    pub fn forward(&self, batch: &Matrix) -> Result<Matrix> {
        self.check_input(batch)?;
        let mut x = batch.clone();
        for layer in &self.layers {
            let (_, y) = affine_act(layer, &x);
            x = y;
        }
        Ok(x)
    }

    pub fn forward_cached(&self, batch: &Matrix) -> Result<(Matrix, ForwardCache)> {
        self.check_input(batch)?;
        let mut cache = ForwardCache::default();
        let mut x = batch.clone();
        for layer in &self.layers {
            let (z, y) = affine_act(layer, &x);
            cache.inputs.push(x);
            cache.pre.push(z);
            cache.outputs.push(y.clone());
            x = y;
        }
        Ok((x, cache))
    }

    pub fn backward(&self, cache: &ForwardCache, grad_out: &Matrix) -> Result<MlpGrads> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::State(
                "backward called without a matching forward cache".into(),
            ));
        }
        let last = &cache.outputs[self.layers.len() - 1];
        if grad_out.rows() != last.rows() || grad_out.cols() != last.cols() {
            return Err(invalid(format!(
                "grad shape {}x{} does not match forward output {}x{}",
                grad_out.rows(),
                grad_out.cols(),
                last.rows(),
                last.cols()
            )));
        }
        let n = self.layers.len();
        let mut weights = vec![Matrix::zeros(0, 0); n];
        let mut biases = vec![Vec::new(); n];
        let mut delta = grad_out.clone();
        for k in (0..n).rev() {
            let layer = &self.layers[k];
            let z = &cache.pre[k];
            let y = &cache.outputs[k];
            for ((d, &zv), &yv) in delta.data.iter_mut().zip(&z.data).zip(&y.data) {
                *d *= layer.activation.derivative(zv, yv);
            }
            weights[k] = cache.inputs[k].t_matmul(&delta)?;
            let mut gb = vec![0.0; layer.out_dim()];
            for r in 0..delta.rows() {
                for (g, &d) in gb.iter_mut().zip(delta.row(r)) {
                    *g += d;
                }
            }
            biases[k] = gb;
            delta = delta.matmul_t(&layer.weights)?;
        }
        Ok(MlpGrads {
            weights,
            biases,
            input: delta,
        })
    }

    fn check_input(&self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.input_dim() {
            return Err(invalid(format!(
                "batch has {} columns, model expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }
}

fn affine_act(layer: &Dense, x: &Matrix) -> (Matrix, Matrix) {
    // Shapes are validated by the caller.
    let mut z = x.matmul(&layer.weights).expect("validated shapes");
    for r in 0..z.rows() {
        for (v, &b) in z.row_mut(r).iter_mut().zip(&layer.biases) {
            *v += b;
        }
    }
    let mut y = z.clone();
    for v in &mut y.data {
        *v = layer.activation.apply(*v);
    }
    (z, y)
}

/// Adam moments for an ordered list of parameter blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient entry was NaN or infinite; parameters were left untouched.
    SkippedNonFinite,
}

impl Default for OptimizerState {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl OptimizerState {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn adam_step(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
        lr: f64,
    ) -> Result<StepOutcome> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(invalid(format!("learning rate must be positive, got {lr}")));
        }
        if params.len() != grads.len() {
            return Err(invalid("parameter and gradient block counts differ"));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(invalid("parameter and gradient block shapes differ"));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len()
            || self
                .m
                .iter()
                .zip(params.iter())
                .any(|(m, p)| m.len() != p.len())
        {
            return Err(invalid("parameter layout changed between Adam steps"));
        }
        if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            log::warn!(
                "adam: non-finite gradient at step {}, update skipped",
                self.step + 1
            );
            return Ok(StepOutcome::SkippedNonFinite);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (block, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.m[block];
            let v = &mut self.v[block];
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(StepOutcome::Applied)
    }
}

/// Cosine annealing within one epoch; `progress` restarts at 0 every epoch.
pub fn cosine_warm_restart_lr(progress: f64, lr_max: f64, lr_min: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&progress) {
        return Err(invalid(format!("progress {progress} outside [0, 1]")));
    }
    if lr_min > lr_max {
        return Err(invalid("lr_min must not exceed lr_max"));
    }
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Naive per-element re-implementation used as an oracle.
    fn naive_forward(model: &MlpModel, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for layer in model.layers() {
            let mut next = vec![0.0; layer.out_dim()];
            for (j, out) in next.iter_mut().enumerate() {
                let mut acc = layer.biases[j];
                for (i, &xi) in cur.iter().enumerate() {
                    acc += xi * layer.weights.get(i, j);
                }
                *out = match layer.activation {
                    Activation::Relu => {
                        if acc > 0.0 {
                            acc
                        } else {
                            0.0
                        }
                    }
                    Activation::Tanh => acc.tanh(),
                    Activation::Linear => acc,
                };
            }
            cur = next;
        }
        cur
    }

    fn random_batch(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols)
            .map(|_| r.random_range(-1.0..1.0))
            .collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let mut model = MlpModel::new(&[3, 4, 2], &mut rng(0)).unwrap();
        for p in model.param_slices_mut() {
            p.fill(0.0);
        }
        let out = model.forward(&random_batch(&mut rng(1), 5, 3)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_linear_layer_is_identity() {
        let layer = Dense {
            weights: Matrix::identity(3),
            biases: vec![0.0; 3],
            activation: Activation::Linear,
        };
        let model = MlpModel::from_layers(vec![layer]).unwrap();
        let x = random_batch(&mut rng(2), 4, 3);
        assert_eq!(model.forward(&x).unwrap(), x);
    }

    #[test]
    fn forward_matches_naive_loops() {
        let model = MlpModel::new(&[4, 6, 3], &mut rng(7)).unwrap();
        let x = random_batch(&mut rng(8), 9, 4);
        let out = model.forward(&x).unwrap();
        for r in 0..x.rows() {
            let expect = naive_forward(&model, x.row(r));
            for (a, b) in out.row(r).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let model = MlpModel::new(&[3, 2], &mut rng(0)).unwrap();
        let err = model.forward(&Matrix::zeros(2, 4)).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn backward_without_cache_is_state_error() {
        let model = MlpModel::new(&[3, 2], &mut rng(0)).unwrap();
        let err = model
            .backward(&ForwardCache::default(), &Matrix::zeros(1, 2))
            .unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let model = MlpModel::new(&[3, 5, 2], &mut rng(3)).unwrap();
        let x = random_batch(&mut rng(4), 6, 3);
        let (_, cache) = model.forward_cached(&x).unwrap();
        let g = model.backward(&cache, &Matrix::zeros(6, 2)).unwrap();
        assert!(g.slices().iter().all(|s| s.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn linear_sum_loss_weight_grad_is_input_column_sums() {
        let mut model = MlpModel::new(&[3, 2], &mut rng(5)).unwrap();
        let x = random_batch(&mut rng(6), 7, 3);
        let _ = &mut model;
        let (_, cache) = model.forward_cached(&x).unwrap();
        let ones = Matrix::from_vec(7, 2, vec![1.0; 14]).unwrap();
        let g = model.backward(&cache, &ones).unwrap();
        for i in 0..3 {
            let col_sum: f64 = (0..7).map(|r| x.get(r, i)).sum();
            for j in 0..2 {
                assert!((g.weights[0].get(i, j) - col_sum).abs() < 1e-12);
            }
        }
        assert!(g.biases[0].iter().all(|&b| (b - 7.0).abs() < 1e-12));
    }

    /// Scalar loss `Σ c ⊙ out` with fixed random `c`.
    fn probe_loss(model: &MlpModel, x: &Matrix, c: &Matrix) -> f64 {
        dot(model.forward(x).unwrap().data(), c.data())
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut r = rng(11);
        let mut model = MlpModel::with_activation(&[4, 7, 5, 3], Activation::Tanh, &mut r).unwrap();
        let x = random_batch(&mut r, 6, 4);
        let c = random_batch(&mut r, 6, 3);
        let (_, cache) = model.forward_cached(&x).unwrap();
        let grads = model.backward(&cache, &c).unwrap();
        let flat_grads: Vec<f64> = grads.slices().concat();
        let h = 1e-5;
        let total = model.param_count();
        for _ in 0..20 {
            let idx = r.random_range(0..total);
            let (block, off) = locate(&model, idx);
            let orig = model.param_slices_mut()[block][off];
            model.param_slices_mut()[block][off] = orig + h;
            let lp = probe_loss(&model, &x, &c);
            model.param_slices_mut()[block][off] = orig - h;
            let lm = probe_loss(&model, &x, &c);
            model.param_slices_mut()[block][off] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = flat_grads[idx];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
            assert!(
                rel < 1e-5,
                "param {idx}: analytic {analytic} numeric {numeric}"
            );
        }
    }

    fn locate(model: &MlpModel, mut idx: usize) -> (usize, usize) {
        let mut m = model.clone();
        for (b, s) in m.param_slices_mut().iter().enumerate() {
            if idx < s.len() {
                return (b, idx);
            }
            idx -= s.len();
        }
        unreachable!()
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut state = OptimizerState::default();
        let mut p = vec![0.3, -1.2];
        let g = vec![0.0, 0.0];
        state
            .adam_step(&mut [p.as_mut_slice()], &[g.as_slice()], 1e-3)
            .unwrap();
        assert_eq!(p, vec![0.3, -1.2]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // m̂ = 1, v̂ = 1 ⇒ Δ = −lr · 1 / (1 + 1e-8)
        let mut state = OptimizerState::default();
        let mut p = vec![0.0];
        state
            .adam_step(&mut [p.as_mut_slice()], &[[1.0].as_slice()], 1e-3)
            .unwrap();
        assert!((p[0] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn adam_constant_gradient_update_approaches_lr() {
        let mut state = OptimizerState::default();
        let mut p = vec![0.0];
        let mut last = 0.0;
        for _ in 0..5000 {
            let before = p[0];
            state
                .adam_step(&mut [p.as_mut_slice()], &[[0.7].as_slice()], 1e-3)
                .unwrap();
            last = before - p[0];
        }
        assert!((last - 1e-3).abs() < 1e-6);
    }

    #[test]
    fn adam_skips_non_finite() {
        let mut state = OptimizerState::default();
        let mut p = vec![1.0];
        let out = state
            .adam_step(&mut [p.as_mut_slice()], &[[f64::NAN].as_slice()], 1e-3)
            .unwrap();
        assert_eq!(out, StepOutcome::SkippedNonFinite);
        assert_eq!(p, vec![1.0]);
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_warm_restart_lr(0.0, 1e-3, 0.0).unwrap(), 1e-3);
        assert!(cosine_warm_restart_lr(1.0, 1e-3, 0.0).unwrap().abs() < 1e-18);
        assert!((cosine_warm_restart_lr(0.5, 1e-3, 0.0).unwrap() - 5e-4).abs() < 1e-18);
        assert!(cosine_warm_restart_lr(1.1, 1e-3, 0.0).is_err());
        assert!(cosine_warm_restart_lr(0.5, 1e-4, 1e-3).is_err());
    }
}
