//! Multilayer perceptron with batch normalization, dropout, and Adam.
//!
//! For layer sizes `[n0, n1, ..., nL]` each hidden layer applies
//! affine -> batch-norm -> ReLU -> dropout and the output layer is a plain
//! affine map. Training minimizes half mean-squared error (scalar
//! regression) or softmax cross-entropy (classification) with bias-corrected
//! Adam under a step-decay learning-rate schedule.
//!
//! ```text
//! batch-norm (train): y = gamma (x - mu_B) / sqrt(var_B + 1e-5) + beta
//! batch-norm (eval):  y = gamma (x - mean_r) / sqrt(var_r + 1e-5) + beta
//! dropout (train):    y = x m / (1 - rate),  m ~ Bernoulli(1 - rate)
//! Adam:               m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2
//!                     p <- p - lr mhat / (sqrt(vhat) + eps)
//! ```
//!
//! Batch statistics use the biased variance (divide by the batch size).
//! Forward passes never mutate the model; running statistics advance only
//! through [`update_running_stats`], which the train loop calls per batch.
//! After each epoch the loop re-derives the inference statistics from the
//! full training split ([`calibrate_running_stats`]), and an optional final
//! phase trains against those frozen statistics, which removes the batch
//! sampling noise floor when high precision is required. All randomness
//! (init, shuffling, dropout) derives from explicit seeds, so training runs
//! are reproducible bit for bit.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::fmt::{format_g, SIG_EXACT};
use crate::scalar::{real, Real};
use crate::seed::{label, rng_from, split_seed};

pub const BN_EPS: f64 = 1e-5;
/// Weight on the previous running statistic in the per-batch update.
pub const BN_MOMENTUM: f64 = 0.9;
/// First line of the model file.
pub const MODEL_MAGIC: &str = "MLPV1";

#[derive(Debug, Error)]
pub enum MlpError {
    #[error("dimension mismatch: {0}")]
    Dimensions(String),
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fully-connected network with per-hidden-layer batch normalization and
/// input/target standardization stored alongside the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel<T: Real> {
    /// Layer widths, input first.
    pub sizes: Vec<usize>,
    /// `weights[l]` maps layer `l` to `l + 1`: shape `sizes[l+1] x sizes[l]`.
    pub weights: Vec<DMatrix<T>>,
    pub biases: Vec<DVector<T>>,
    /// Batch-norm scale (gamma), one per hidden layer.
    pub bn_scale: Vec<DVector<T>>,
    /// Batch-norm shift (beta), one per hidden layer.
    pub bn_shift: Vec<DVector<T>>,
    /// Running mean used in eval mode.
    pub bn_mean: Vec<DVector<T>>,
    /// Running (biased) variance used in eval mode.
    pub bn_var: Vec<DVector<T>>,
    /// Dropout rate on hidden activations during training.
    pub dropout: T,
    pub input_mean: DVector<T>,
    pub input_std: DVector<T>,
    pub target_mean: DVector<T>,
    pub target_std: DVector<T>,
}

impl<T: Real> MlpModel<T> {
    /// He-uniform initialization (`limit = sqrt(6 / fan_in)`), zero biases,
    /// identity batch-norm and normalization.
    pub fn new(sizes: &[usize], dropout: T, seed: u64) -> Result<Self, MlpError> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(MlpError::Invalid(format!(
                "need at least input and output widths, all positive, got {sizes:?}"
            )));
        }
        if !(dropout >= T::zero() && dropout < T::one()) {
            return Err(MlpError::Invalid(format!(
                "dropout must lie in [0, 1), got {dropout}"
            )));
        }
        let layers = sizes.len() - 1;
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for l in 0..layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let limit = real::<T>((6.0 / fan_in as f64).sqrt());
            let mut rng = rng_from(split_seed(seed, label::INIT, l as u64));
            weights.push(DMatrix::from_fn(fan_out, fan_in, |_, _| {
                (real::<T>(rng.gen::<f64>()) * real(2.0) - T::one()) * limit
            }));
            biases.push(DVector::zeros(fan_out));
        }
        let hidden = &sizes[1..layers];
        let model = Self {
            sizes: sizes.to_vec(),
            weights,
            biases,
            bn_scale: hidden.iter().map(|&w| DVector::repeat(w, T::one())).collect(),
            bn_shift: hidden.iter().map(|&w| DVector::zeros(w)).collect(),
            bn_mean: hidden.iter().map(|&w| DVector::zeros(w)).collect(),
            bn_var: hidden.iter().map(|&w| DVector::repeat(w, T::one())).collect(),
            dropout,
            input_mean: DVector::zeros(sizes[0]),
            input_std: DVector::repeat(sizes[0], T::one()),
            target_mean: DVector::zeros(sizes[layers]),
            target_std: DVector::repeat(sizes[layers], T::one()),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_hidden(&self) -> usize {
        self.sizes.len() - 2
    }

    pub fn validate(&self) -> Result<(), MlpError> {
        let layers = self.sizes.len().checked_sub(1).filter(|&l| l >= 1).ok_or(
            MlpError::Invalid("need at least input and output widths".into()),
        )?;
        let hidden = layers - 1;
        if self.weights.len() != layers || self.biases.len() != layers {
            return Err(MlpError::Invalid("weight/bias count".into()));
        }
        for l in 0..layers {
            if self.weights[l].shape() != (self.sizes[l + 1], self.sizes[l])
                || self.biases[l].len() != self.sizes[l + 1]
            {
                return Err(MlpError::Invalid(format!("layer {l} shape")));
            }
        }
        for field in [&self.bn_scale, &self.bn_shift, &self.bn_mean, &self.bn_var] {
            if field.len() != hidden {
                return Err(MlpError::Invalid("batch-norm vector count".into()));
            }
            for (l, v) in field.iter().enumerate() {
                if v.len() != self.sizes[l + 1] {
                    return Err(MlpError::Invalid(format!("batch-norm width, layer {l}")));
                }
            }
        }
        if self.bn_var.iter().any(|v| v.iter().any(|&x| !(x > T::zero()))) {
            return Err(MlpError::Invalid("running variances must be positive".into()));
        }
        if !(self.dropout >= T::zero() && self.dropout < T::one()) {
            return Err(MlpError::Invalid("dropout must lie in [0, 1)".into()));
        }
        if self.input_mean.len() != self.sizes[0]
            || self.input_std.len() != self.sizes[0]
            || self.target_mean.len() != self.sizes[layers]
            || self.target_std.len() != self.sizes[layers]
        {
            return Err(MlpError::Invalid("normalization vector length".into()));
        }
        if self.input_std.iter().chain(self.target_std.iter()).any(|&s| !(s > T::zero())) {
            return Err(MlpError::Invalid("normalization stds must be positive".into()));
        }
        Ok(())
    }

    /// Standardize raw inputs, run an eval-mode forward pass, and map the
    /// output back to target units.
    pub fn predict(&self, x_raw: &DMatrix<T>) -> Result<DMatrix<T>, MlpError> {
        let xn = self.normalize_inputs(x_raw)?;
        let (mut out, _) = forward(self, &xn, Mode::Eval)?;
        for j in 0..out.ncols() {
            for i in 0..out.nrows() {
                out[(i, j)] = out[(i, j)] * self.target_std[j] + self.target_mean[j];
            }
        }
        Ok(out)
    }

    fn normalize_inputs(&self, x_raw: &DMatrix<T>) -> Result<DMatrix<T>, MlpError> {
        if x_raw.ncols() != self.input_dim() {
            return Err(MlpError::Dimensions(format!(
                "expected {} input features, got {}",
                self.input_dim(),
                x_raw.ncols()
            )));
        }
        Ok(DMatrix::from_fn(x_raw.nrows(), x_raw.ncols(), |i, j| {
            (x_raw[(i, j)] - self.input_mean[j]) / self.input_std[j]
        }))
    }

    /// Serializes as: `MLPV1`, the layer sizes, then per layer weights
    /// (row-major) and biases, then per hidden layer batch-norm scale,
    /// shift, running mean, running variance, then the four normalization
    /// vectors. Values round-trip exactly.
    pub fn save(&self, path: &Path) -> Result<(), MlpError> {
        self.validate()?;
        let mut out = String::new();
        out.push_str(MODEL_MAGIC);
        out.push('\n');
        let sizes: Vec<String> = self.sizes.iter().map(|s| s.to_string()).collect();
        out.push_str(&sizes.join(" "));
        out.push('\n');
        let write_vec = |v: &DVector<T>, out: &mut String| {
            let row: Vec<String> = v.iter().map(|&x| format_g(x.to_f64(), SIG_EXACT)).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        };
        for l in 0..self.weights.len() {
            let w = &self.weights[l];
            for i in 0..w.nrows() {
                let row: Vec<String> = (0..w.ncols())
                    .map(|j| format_g(w[(i, j)].to_f64(), SIG_EXACT))
                    .collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
            write_vec(&self.biases[l], &mut out);
        }
        for l in 0..self.num_hidden() {
            write_vec(&self.bn_scale[l], &mut out);
            write_vec(&self.bn_shift[l], &mut out);
            write_vec(&self.bn_mean[l], &mut out);
            write_vec(&self.bn_var[l], &mut out);
        }
        write_vec(&self.input_mean, &mut out);
        write_vec(&self.input_std, &mut out);
        write_vec(&self.target_mean, &mut out);
        write_vec(&self.target_std, &mut out);
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Loads a file written by [`MlpModel::save`]. The dropout rate is a
    /// training-time knob and is not stored; it loads as zero.
    pub fn load(path: &Path) -> Result<Self, MlpError> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let magic = lines.next().unwrap_or_default().trim();
        if magic != MODEL_MAGIC {
            return Err(MlpError::Format(format!(
                "expected leading {MODEL_MAGIC}, found {magic:?}"
            )));
        }
        let sizes: Vec<usize> = lines
            .next()
            .unwrap_or_default()
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| MlpError::Format(format!("bad layer size {t:?}")))
            })
            .collect::<Result<_, _>>()?;
        if sizes.len() < 2 {
            return Err(MlpError::Format("layer size line too short".into()));
        }
        let rest: String = lines.collect::<Vec<_>>().join(" ");
        let mut tokens = rest.split_whitespace();
        let mut next = |what: &str| -> Result<T, MlpError> {
            let t = tokens
                .next()
                .ok_or_else(|| MlpError::Format(format!("file ends inside {what}")))?;
            let v: f64 = t
                .parse()
                .map_err(|_| MlpError::Format(format!("bad number {t:?} in {what}")))?;
            Ok(real(v))
        };
        let layers = sizes.len() - 1;
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for l in 0..layers {
            let (rows, cols) = (sizes[l + 1], sizes[l]);
            let mut w = DMatrix::zeros(rows, cols);
            for i in 0..rows {
                for j in 0..cols {
                    w[(i, j)] = next("weights")?;
                }
            }
            weights.push(w);
            biases.push(DVector::from_fn(rows, |_, _| next("biases").unwrap_or(T::zero())));
        }
        let mut read_vec = |len: usize, what: &str| -> Result<DVector<T>, MlpError> {
            let mut v = DVector::zeros(len);
            for i in 0..len {
                v[i] = next(what)?;
            }
            Ok(v)
        };
        let hidden = layers - 1;
        let (mut bn_scale, mut bn_shift, mut bn_mean, mut bn_var) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for l in 0..hidden {
            bn_scale.push(read_vec(sizes[l + 1], "batch-norm scale")?);
            bn_shift.push(read_vec(sizes[l + 1], "batch-norm shift")?);
            bn_mean.push(read_vec(sizes[l + 1], "batch-norm mean")?);
            bn_var.push(read_vec(sizes[l + 1], "batch-norm variance")?);
        }
        let input_mean = read_vec(sizes[0], "input mean")?;
        let input_std = read_vec(sizes[0], "input std")?;
        let target_mean = read_vec(sizes[layers], "target mean")?;
        let target_std = read_vec(sizes[layers], "target std")?;
        if tokens.next().is_some() {
            return Err(MlpError::Format("trailing data after model".into()));
        }
        let model = Self {
            sizes,
            weights,
            biases,
            bn_scale,
            bn_shift,
            bn_mean,
            bn_var,
            dropout: T::zero(),
            input_mean,
            input_std,
            target_mean,
            target_std,
        };
        model.validate()?;
        Ok(model)
    }
}

/// Forward-pass mode; the train modes cache activations and apply dropout.
#[derive(Debug, Clone, Copy)]
pub enum Mode {
    Eval,
    /// Batch statistics in the normalization layers.
    Train { dropout_seed: u64 },
    /// Running statistics in the normalization layers: the fine-tuning
    /// phase, which optimizes exactly the function used at inference.
    FrozenTrain { dropout_seed: u64 },
}

impl Mode {
    fn dropout_seed(&self) -> Option<u64> {
        match *self {
            Mode::Eval => None,
            Mode::Train { dropout_seed } | Mode::FrozenTrain { dropout_seed } => {
                Some(dropout_seed)
            }
        }
    }

    fn caches(&self) -> bool {
        !matches!(self, Mode::Eval)
    }

    fn frozen_stats(&self) -> bool {
        !matches!(self, Mode::Train { .. })
    }
}

/// Per-hidden-layer activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerCache<T: Real> {
    /// Input to the affine map (batch x fan_in).
    input: DMatrix<T>,
    /// Normalized pre-activation.
    xhat: DMatrix<T>,
    /// `1 / sqrt(var_B + eps)` per feature.
    inv_std: DVector<T>,
    batch_mean: DVector<T>,
    batch_var: DVector<T>,
    /// Batch-norm output (ReLU input).
    bn_out: DMatrix<T>,
    /// Dropout mask including the `1 / (1 - rate)` scale.
    drop_mask: DMatrix<T>,
}

/// Activations of one train-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T: Real> {
    layers: Vec<LayerCache<T>>,
    /// Input to the output affine layer.
    head_input: DMatrix<T>,
    /// Statistics were frozen, so they carry no gradient.
    frozen_stats: bool,
}

/// Runs the network on a batch (rows are samples, already standardized).
/// `Train` uses batch statistics, `FrozenTrain` and `Eval` the running
/// statistics; the train modes apply dropout and return the activation
/// cache. Eval mode is deterministic.
pub fn forward<T: Real>(
    model: &MlpModel<T>,
    x: &DMatrix<T>,
    mode: Mode,
) -> Result<(DMatrix<T>, Option<ForwardCache<T>>), MlpError> {
    model.validate()?;
    if x.ncols() != model.input_dim() {
        return Err(MlpError::Dimensions(format!(
            "expected {} input features, got {}",
            model.input_dim(),
            x.ncols()
        )));
    }
    let batch = x.nrows();
    let eps = real::<T>(BN_EPS);
    let mut h = x.clone();
    let mut caches = Vec::new();
    for l in 0..model.num_hidden() {
        let width = model.sizes[l + 1];
        let mut z = &h * model.weights[l].transpose();
        for j in 0..width {
            for i in 0..batch {
                z[(i, j)] += model.biases[l][j];
            }
        }
        let (mean, var) = if mode.frozen_stats() {
            (model.bn_mean[l].clone(), model.bn_var[l].clone())
        } else {
            let inv_b = T::one() / real(batch as f64);
            let mut mean = DVector::zeros(width);
            let mut var = DVector::zeros(width);
            for j in 0..width {
                let mut s = T::zero();
                for i in 0..batch {
                    s += z[(i, j)];
                }
                mean[j] = s * inv_b;
                let mut q = T::zero();
                for i in 0..batch {
                    let d = z[(i, j)] - mean[j];
                    q += d * d;
                }
                var[j] = q * inv_b;
            }
            (mean, var)
        };
        let inv_std = DVector::from_fn(width, |j, _| T::one() / (var[j] + eps).sqrt());
        let xhat = DMatrix::from_fn(batch, width, |i, j| (z[(i, j)] - mean[j]) * inv_std[j]);
        let bn_out = DMatrix::from_fn(batch, width, |i, j| {
            model.bn_scale[l][j] * xhat[(i, j)] + model.bn_shift[l][j]
        });
        let mut act = bn_out.map(|v| if v > T::zero() { v } else { T::zero() });
        let drop_mask = match mode.dropout_seed() {
            Some(dropout_seed) if model.dropout > T::zero() => {
                let keep = T::one() - model.dropout;
                let keep_f = keep.to_f64();
                let scale = T::one() / keep;
                let mut rng = rng_from(split_seed(dropout_seed, label::DROPOUT, l as u64));
                DMatrix::from_fn(batch, width, |_, _| {
                    if rng.gen::<f64>() < keep_f {
                        scale
                    } else {
                        T::zero()
                    }
                })
            }
            _ => DMatrix::repeat(batch, width, T::one()),
        };
        act.component_mul_assign(&drop_mask);
        if mode.caches() {
            caches.push(LayerCache {
                input: h,
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var: var,
                bn_out,
                drop_mask,
            });
        }
        h = act;
    }
    let last = model.weights.len() - 1;
    let mut out = &h * model.weights[last].transpose();
    for j in 0..out.ncols() {
        for i in 0..batch {
            out[(i, j)] += model.biases[last][j];
        }
    }
    let cache = mode.caches().then(|| ForwardCache {
        layers: caches,
        head_input: h,
        frozen_stats: mode.frozen_stats(),
    });
    Ok((out, cache))
}

/// Advances the running batch-norm statistics from a train-mode cache:
/// `running <- momentum * running + (1 - momentum) * batch`.
pub fn update_running_stats<T: Real>(model: &mut MlpModel<T>, cache: &ForwardCache<T>) {
    let momentum = real::<T>(BN_MOMENTUM);
    let blend = T::one() - momentum;
    for l in 0..model.num_hidden() {
        for j in 0..model.bn_mean[l].len() {
            model.bn_mean[l][j] = momentum * model.bn_mean[l][j] + blend * cache.layers[l].batch_mean[j];
            model.bn_var[l][j] = momentum * model.bn_var[l][j] + blend * cache.layers[l].batch_var[j];
        }
    }
}

/// Replaces the running batch-norm statistics with statistics averaged over
/// `x` processed in order in `batch_size` batches (dropout disabled). This
/// removes the gap between batch-statistics behavior during optimization
/// and running-statistics behavior at inference; the train loop applies it
/// before measuring the loss curves each epoch.
pub fn calibrate_running_stats<T: Real>(
    model: &mut MlpModel<T>,
    x: &DMatrix<T>,
    batch_size: usize,
) -> Result<(), MlpError> {
    if x.nrows() == 0 || batch_size == 0 {
        return Err(MlpError::Invalid(
            "calibration needs samples and a positive batch size".into(),
        ));
    }
    let saved_dropout = model.dropout;
    model.dropout = T::zero();
    let hidden = model.num_hidden();
    let mut mean_acc: Vec<DVector<T>> =
        model.bn_mean.iter().map(|v| DVector::zeros(v.len())).collect();
    let mut var_acc = mean_acc.clone();
    let mut batches = 0usize;
    let mut i = 0;
    while i < x.nrows() {
        let rows = batch_size.min(x.nrows() - i);
        let xb = x.rows(i, rows).into_owned();
        let result = forward(model, &xb, Mode::Train { dropout_seed: 0 });
        let (_, cache) = match result {
            Ok(v) => v,
            Err(e) => {
                model.dropout = saved_dropout;
                return Err(e);
            }
        };
        let cache = cache.expect("train mode caches activations");
        for l in 0..hidden {
            mean_acc[l] += &cache.layers[l].batch_mean;
            var_acc[l] += &cache.layers[l].batch_var;
        }
        batches += 1;
        i += rows;
    }
    model.dropout = saved_dropout;
    let inv = T::one() / real(batches as f64);
    let floor = real::<T>(1e-30);
    for l in 0..hidden {
        for j in 0..model.bn_mean[l].len() {
            model.bn_mean[l][j] = mean_acc[l][j] * inv;
            let v = var_acc[l][j] * inv;
            model.bn_var[l][j] = if v > floor { v } else { floor };
        }
    }
    Ok(())
}

/// Parameter-shaped gradient (or Adam moment) storage.
#[derive(Debug, Clone)]
pub struct Gradients<T: Real> {
    pub w: Vec<DMatrix<T>>,
    pub b: Vec<DVector<T>>,
    pub gamma: Vec<DVector<T>>,
    pub beta: Vec<DVector<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(model: &MlpModel<T>) -> Self {
        Self {
            w: model.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            b: model.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
            gamma: model.bn_scale.iter().map(|g| DVector::zeros(g.len())).collect(),
            beta: model.bn_shift.iter().map(|b| DVector::zeros(b.len())).collect(),
        }
    }

    /// Largest absolute entry, for sanity checks.
    pub fn max_abs(&self) -> T {
        let mut m = T::zero();
        let mats = self.w.iter().flat_map(|w| w.iter());
        let vecs = self
            .b
            .iter()
            .chain(self.gamma.iter())
            .chain(self.beta.iter())
            .flat_map(|v| v.iter());
        for &x in mats.chain(vecs) {
            if x.abs() > m {
                m = x.abs();
            }
        }
        m
    }
}

/// Backpropagates an arbitrary gradient of the loss with respect to the
/// network output through the cached forward pass.
pub fn backward_from_output<T: Real>(
    model: &MlpModel<T>,
    cache: &ForwardCache<T>,
    dout: &DMatrix<T>,
) -> Gradients<T> {
    let mut grads = Gradients::zeros_like(model);
    let last = model.weights.len() - 1;
    let batch = dout.nrows();
    grads.w[last] = dout.transpose() * &cache.head_input;
    for j in 0..dout.ncols() {
        let mut s = T::zero();
        for i in 0..batch {
            s += dout[(i, j)];
        }
        grads.b[last][j] = s;
    }
    let mut dh = dout * &model.weights[last];
    for l in (0..model.num_hidden()).rev() {
        let layer = &cache.layers[l];
        let width = layer.xhat.ncols();
        let inv_b = T::one() / real(batch as f64);
        // Dropout and ReLU backward.
        let mut d = dh.component_mul(&layer.drop_mask);
        for j in 0..width {
            for i in 0..batch {
                if layer.bn_out[(i, j)] <= T::zero() {
                    d[(i, j)] = T::zero();
                }
            }
        }
        // Batch-norm backward; frozen statistics carry no gradient, so the
        // mean/variance coupling terms drop.
        let mut dz = DMatrix::zeros(batch, width);
        for j in 0..width {
            let mut sum_d = T::zero();
            let mut sum_dx = T::zero();
            for i in 0..batch {
                sum_d += d[(i, j)];
                sum_dx += d[(i, j)] * layer.xhat[(i, j)];
            }
            grads.beta[l][j] = sum_d;
            grads.gamma[l][j] = sum_dx;
            let k = model.bn_scale[l][j] * layer.inv_std[j];
            if cache.frozen_stats {
                for i in 0..batch {
                    dz[(i, j)] = k * d[(i, j)];
                }
            } else {
                let mean_d = sum_d * inv_b;
                let mean_dx = sum_dx * inv_b;
                for i in 0..batch {
                    dz[(i, j)] = k * (d[(i, j)] - mean_d - layer.xhat[(i, j)] * mean_dx);
                }
            }
        }
        grads.w[l] = dz.transpose() * &layer.input;
        for j in 0..width {
            let mut s = T::zero();
            for i in 0..batch {
                s += dz[(i, j)];
            }
            grads.b[l][j] = s;
        }
        dh = &dz * &model.weights[l];
    }
    grads
}

/// Half mean-squared error and its output gradient for scalar regression.
pub fn squared_error_grad<T: Real>(pred: &DMatrix<T>, targets: &DVector<T>) -> (T, DMatrix<T>) {
    assert_eq!(pred.ncols(), 1, "squared-error head is scalar");
    assert_eq!(pred.nrows(), targets.len());
    let batch = pred.nrows();
    let inv_b = T::one() / real(batch as f64);
    let mut loss = T::zero();
    let mut dout = DMatrix::zeros(batch, 1);
    for i in 0..batch {
        let r = pred[(i, 0)] - targets[i];
        loss += r * r;
        dout[(i, 0)] = r * inv_b;
    }
    (loss * inv_b * real(0.5), dout)
}

/// Softmax cross-entropy and its logit gradient for classification.
pub fn cross_entropy_grad<T: Real>(logits: &DMatrix<T>, labels: &[usize]) -> (T, DMatrix<T>) {
    assert_eq!(logits.nrows(), labels.len());
    let (batch, classes) = logits.shape();
    let inv_b = T::one() / real(batch as f64);
    let mut loss = T::zero();
    let mut dout = DMatrix::zeros(batch, classes);
    for i in 0..batch {
        assert!(labels[i] < classes, "label out of range");
        let mut max = logits[(i, 0)];
        for j in 1..classes {
            if logits[(i, j)] > max {
                max = logits[(i, j)];
            }
        }
        let mut denom = T::zero();
        for j in 0..classes {
            denom += (logits[(i, j)] - max).exp();
        }
        loss -= logits[(i, labels[i])] - max - denom.ln();
        for j in 0..classes {
            let p = (logits[(i, j)] - max).exp() / denom;
            let y = if j == labels[i] { T::one() } else { T::zero() };
            dout[(i, j)] = (p - y) * inv_b;
        }
    }
    (loss * inv_b, dout)
}

/// Gradients and loss of half mean-squared error against `targets`.
pub fn backward<T: Real>(
    model: &MlpModel<T>,
    cache: &ForwardCache<T>,
    pred: &DMatrix<T>,
    targets: &DVector<T>,
) -> (Gradients<T>, T) {
    let (loss, dout) = squared_error_grad(pred, targets);
    (backward_from_output(model, cache, &dout), loss)
}

/// Bias-corrected Adam accumulator.
#[derive(Debug, Clone)]
pub struct AdamState<T: Real> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    pub t: u64,
    m: Gradients<T>,
    v: Gradients<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(model: &MlpModel<T>, lr: T) -> Self {
        Self {
            lr,
            beta1: real(0.9),
            beta2: real(0.999),
            epsilon: real(1e-8),
            t: 0,
            m: Gradients::zeros_like(model),
            v: Gradients::zeros_like(model),
        }
    }
}

fn adam_slice<T: Real>(
    p: &mut [T],
    g: &[T],
    m: &mut [T],
    v: &mut [T],
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    bc1: T,
    bc2: T,
) {
    for i in 0..p.len() {
        m[i] = beta1 * m[i] + (T::one() - beta1) * g[i];
        v[i] = beta2 * v[i] + (T::one() - beta2) * g[i] * g[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        p[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
}

/// One Adam update of every parameter (weights, biases, batch-norm scale
/// and shift; running statistics are not parameters).
pub fn adam_step<T: Real>(model: &mut MlpModel<T>, grads: &Gradients<T>, state: &mut AdamState<T>) {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = T::one() - state.beta1.powi(t);
    let bc2 = T::one() - state.beta2.powi(t);
    let (lr, b1, b2, eps) = (state.lr, state.beta1, state.beta2, state.epsilon);
    for l in 0..model.weights.len() {
        adam_slice(
            model.weights[l].as_mut_slice(),
            grads.w[l].as_slice(),
            state.m.w[l].as_mut_slice(),
            state.v.w[l].as_mut_slice(),
            lr, b1, b2, eps, bc1, bc2,
        );
        adam_slice(
            model.biases[l].as_mut_slice(),
            grads.b[l].as_slice(),
            state.m.b[l].as_mut_slice(),
            state.v.b[l].as_mut_slice(),
            lr, b1, b2, eps, bc1, bc2,
        );
    }
    for l in 0..model.bn_scale.len() {
        adam_slice(
            model.bn_scale[l].as_mut_slice(),
            grads.gamma[l].as_slice(),
            state.m.gamma[l].as_mut_slice(),
            state.v.gamma[l].as_mut_slice(),
            lr, b1, b2, eps, bc1, bc2,
        );
        adam_slice(
            model.bn_shift[l].as_mut_slice(),
            grads.beta[l].as_slice(),
            state.m.beta[l].as_mut_slice(),
            state.v.beta[l].as_mut_slice(),
            lr, b1, b2, eps, bc1, bc2,
        );
    }
}

/// Training hyperparameters; the defaults are the deployment settings.
#[derive(Debug, Clone)]
pub struct TrainConfig<T: Real> {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate; halves every `decay_every` epochs.
    pub lr: T,
    pub lr_decay: T,
    pub decay_every: usize,
    pub dropout: T,
    /// Held-out fraction (at least one sample each side).
    pub val_fraction: f64,
    pub seed: u64,
    /// From this epoch on, batch-norm statistics are frozen at their
    /// calibrated values and training optimizes the inference function
    /// directly (the fine-tuning phase). The optimizer state and the
    /// learning-rate schedule restart at the boundary. `None` never
    /// freezes.
    pub freeze_stats_after: Option<usize>,
}

impl<T: Real> Default for TrainConfig<T> {
    fn default() -> Self {
        Self {
            hidden: vec![512, 512, 512],
            epochs: 50,
            batch_size: 64,
            lr: real(1e-3),
            lr_decay: real(0.5),
            decay_every: 20,
            dropout: real(0.1),
            val_fraction: 0.1,
            seed: 0,
            freeze_stats_after: None,
        }
    }
}

/// Training result: the best-validation checkpoint and per-epoch loss
/// curves (eval mode, standardized units).
#[derive(Debug, Clone)]
pub struct TrainReport<T: Real> {
    pub model: MlpModel<T>,
    pub train_loss: Vec<T>,
    pub val_loss: Vec<T>,
    pub best_epoch: usize,
}

enum Task<'a, T: Real> {
    Regress(&'a DVector<T>),
    Classify(&'a [usize], usize),
}

/// Trains a scalar regressor on standardized features and targets. The
/// standardization statistics come from the training split and are stored
/// in the returned model, so `predict` works in raw units.
pub fn train_regression<T: Real>(
    x: &DMatrix<T>,
    y: &DVector<T>,
    cfg: &TrainConfig<T>,
) -> Result<TrainReport<T>, MlpError> {
    if x.nrows() != y.len() {
        return Err(MlpError::Dimensions(format!(
            "{} feature rows vs {} targets",
            x.nrows(),
            y.len()
        )));
    }
    train_inner(x, Task::Regress(y), cfg)
}

/// Trains a classifier over `classes` outputs with softmax cross-entropy.
/// Features are standardized; the identity target normalization is kept so
/// `predict` returns raw logits.
pub fn train_classifier<T: Real>(
    x: &DMatrix<T>,
    labels: &[usize],
    classes: usize,
    cfg: &TrainConfig<T>,
) -> Result<TrainReport<T>, MlpError> {
    if x.nrows() != labels.len() {
        return Err(MlpError::Dimensions(format!(
            "{} feature rows vs {} labels",
            x.nrows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(MlpError::Dimensions(format!(
            "label {bad} outside {classes} classes"
        )));
    }
    train_inner(x, Task::Classify(labels, classes), cfg)
}

/// The trainer's deterministic row split for `n >= 2` samples: the shuffled
/// order and the length of its held-out prefix. External evaluations use it
/// to score exactly the split the trainer validated on.
pub fn holdout_split(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, usize) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(split_seed(seed, label::SHUFFLE, 0)));
    let val_count = ((n as f64 * val_fraction).round() as usize).clamp(1, n.max(2) - 1);
    (order, val_count)
}

fn train_inner<T: Real>(
    x: &DMatrix<T>,
    task: Task<'_, T>,
    cfg: &TrainConfig<T>,
) -> Result<TrainReport<T>, MlpError> {
    let n = x.nrows();
    if n < 2 {
        return Err(MlpError::Invalid(format!(
            "need at least 2 samples to split, got {n}"
        )));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(MlpError::Invalid("batch_size and epochs must be >= 1".into()));
    }
    let n_features = x.ncols();
    let out_dim = match task {
        Task::Regress(_) => 1,
        Task::Classify(_, classes) => classes,
    };

    // Split.
    let (order, val_count) = holdout_split(n, cfg.val_fraction, cfg.seed);
    let (val_idx, train_idx) = order.split_at(val_count);

    // Standardization from the training split.
    let inv_tr = T::one() / real(train_idx.len() as f64);
    let mut input_mean = DVector::zeros(n_features);
    let mut input_std = DVector::zeros(n_features);
    for j in 0..n_features {
        let mut s = T::zero();
        for &i in train_idx {
            s += x[(i, j)];
        }
        let mean = s * inv_tr;
        let mut q = T::zero();
        for &i in train_idx {
            let d = x[(i, j)] - mean;
            q += d * d;
        }
        let std = (q * inv_tr).sqrt();
        input_mean[j] = mean;
        input_std[j] = if std > real(1e-12) { std } else { T::one() };
    }
    let xn = DMatrix::from_fn(n, n_features, |i, j| (x[(i, j)] - input_mean[j]) / input_std[j]);

    let (targets_n, target_mean, target_std) = match task {
        Task::Regress(y) => {
            let mut s = T::zero();
            for &i in train_idx {
                s += y[i];
            }
            let mean = s * inv_tr;
            let mut q = T::zero();
            for &i in train_idx {
                let d = y[i] - mean;
                q += d * d;
            }
            let raw_std = (q * inv_tr).sqrt();
            let std = if raw_std > real(1e-12) { raw_std } else { T::one() };
            let yn = DVector::from_fn(n, |i, _| (y[i] - mean) / std);
            (Some(yn), mean, std)
        }
        Task::Classify(..) => (None, T::zero(), T::one()),
    };

    let mut sizes = Vec::with_capacity(cfg.hidden.len() + 2);
    sizes.push(n_features);
    sizes.extend_from_slice(&cfg.hidden);
    sizes.push(out_dim);
    let mut model = MlpModel::new(&sizes, cfg.dropout, cfg.seed)?;
    model.input_mean = input_mean;
    model.input_std = input_std;
    model.target_mean = DVector::repeat(out_dim, T::zero());
    model.target_std = DVector::repeat(out_dim, T::one());
    if matches!(task, Task::Regress(_)) {
        model.target_mean[0] = target_mean;
        model.target_std[0] = target_std;
    }

    let gather = |idx: &[usize]| DMatrix::from_fn(idx.len(), n_features, |i, j| xn[(idx[i], j)]);
    let eval_loss = |model: &MlpModel<T>, idx: &[usize]| -> Result<T, MlpError> {
        let (pred, _) = forward(model, &gather(idx), Mode::Eval)?;
        Ok(match task {
            Task::Regress(_) => {
                let yn = targets_n.as_ref().unwrap();
                let yb = DVector::from_fn(idx.len(), |i, _| yn[idx[i]]);
                squared_error_grad(&pred, &yb).0
            }
            Task::Classify(labels, _) => {
                let lb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                cross_entropy_grad(&pred, &lb).0
            }
        })
    };

    let mut adam = AdamState::new(&model, cfg.lr);
    let mut train_loss = Vec::with_capacity(cfg.epochs);
    let mut val_loss = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(T, usize, MlpModel<T>)> = None;
    let mut shuffled: Vec<usize> = train_idx.to_vec();
    let x_train = gather(train_idx);
    for epoch in 0..cfg.epochs {
        let frozen = cfg.freeze_stats_after.map(|e| epoch >= e).unwrap_or(false);
        if cfg.freeze_stats_after == Some(epoch) {
            adam = AdamState::new(&model, cfg.lr);
        }
        let phase_epoch = match cfg.freeze_stats_after {
            Some(f) if epoch >= f => epoch - f,
            _ => epoch,
        };
        adam.lr = cfg.lr * cfg.lr_decay.powi((phase_epoch / cfg.decay_every) as i32);
        shuffled.shuffle(&mut rng_from(split_seed(cfg.seed, label::SHUFFLE, epoch as u64 + 1)));
        for (bi, chunk) in shuffled.chunks(cfg.batch_size).enumerate() {
            let xb = gather(chunk);
            let dropout_seed =
                split_seed(cfg.seed, label::DROPOUT, (epoch * 1_000_000 + bi) as u64);
            let mode = if frozen {
                Mode::FrozenTrain { dropout_seed }
            } else {
                Mode::Train { dropout_seed }
            };
            let (pred, cache) = forward(&model, &xb, mode)?;
            let cache = cache.expect("train mode caches activations");
            let dout = match task {
                Task::Regress(_) => {
                    let yn = targets_n.as_ref().unwrap();
                    let yb = DVector::from_fn(chunk.len(), |i, _| yn[chunk[i]]);
                    squared_error_grad(&pred, &yb).1
                }
                Task::Classify(labels, _) => {
                    let lb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                    cross_entropy_grad(&pred, &lb).1
                }
            };
            let grads = backward_from_output(&model, &cache, &dout);
            adam_step(&mut model, &grads, &mut adam);
            if !frozen {
                update_running_stats(&mut model, &cache);
            }
        }
        if !frozen {
            calibrate_running_stats(&mut model, &x_train, cfg.batch_size)?;
        }
        let tl = eval_loss(&model, train_idx)?;
        let vl = eval_loss(&model, val_idx)?;
        train_loss.push(tl);
        val_loss.push(vl);
        if best.as_ref().map(|(b, _, _)| vl < *b).unwrap_or(true) {
            best = Some((vl, epoch, model.clone()));
        }
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch ran");
    Ok(TrainReport {
        model: best_model,
        train_loss,
        val_loss,
        best_epoch,
    })
}
