//! Conditional denoiser `z0_hat = f(z_t, x, t)`: an MLP over
//! `[z_t ‖ x ‖ time_embedding(t)]` with smooth activations, hand-written
//! reverse-mode gradients, and an Adam optimizer.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::Denoise;
use crate::heads::HeadParams;
use crate::losses::{self, LossConfig, LossWeights, Temperatures};
use crate::trainer::TrainingBatch;
use crate::{Error, Result};

/// Sinusoidal features `[sin(t w_j) ..., cos(t w_j) ...]` with
/// `w_j = 10000^(-j / (width/2))`.
pub fn time_embedding(t: usize, width: usize, total: usize) -> Result<Vec<f64>> {
    if width % 2 != 0 {
        return Err(Error::invalid(format!("time embedding width must be even, got {width}")));
    }
    if t > total {
        return Err(Error::Domain(format!("timestep {t} exceeds T = {total}")));
    }
    let mut out = vec![0.0; width];
    fill_time_embedding(t, &mut out);
    Ok(out)
}

fn fill_time_embedding(t: usize, out: &mut [f64]) {
    let half = out.len() / 2;
    let t = t as f64;
    for j in 0..half {
        let freq = (-(j as f64) / half as f64 * 10000f64.ln()).exp();
        let (s, c) = (t * freq).sin_cos();
        out[j] = s;
        out[half + j] = c;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// tanh-approximated GELU.
    #[default]
    Gelu,
    Tanh,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Activation::Tanh => x.tanh(),
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            Activation::Tanh => {
                let th = x.tanh();
                1.0 - th * th
            }
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Activation::Gelu => 0,
            Activation::Tanh => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Gelu),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// Fully connected layer; `weight` is `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    embed_dim: usize,
    feature_dim: usize,
    time_dim: usize,
    steps: usize,
    activation: Activation,
    layers: Vec<Dense>,
}

/// Layer inputs and pre-activations kept for the backward pass.
struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl DenoiserParams {
    /// Fan-in scaled uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        embed_dim: usize,
        feature_dim: usize,
        time_dim: usize,
        hidden_width: usize,
        hidden_layers: usize,
        steps: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let widths = Self::widths(embed_dim, feature_dim, time_dim, hidden_width, hidden_layers)?;
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                Dense {
                    weight: Array2::from_shape_simple_fn((w[0], w[1]), || rng.random_range(-bound..bound)),
                    bias: Array1::from_shape_simple_fn(w[1], || rng.random_range(-bound..bound)),
                }
            })
            .collect();
        Ok(Self {
            embed_dim,
            feature_dim,
            time_dim,
            steps,
            activation,
            layers,
        })
    }

    pub fn zeros(
        embed_dim: usize,
        feature_dim: usize,
        time_dim: usize,
        hidden_width: usize,
        hidden_layers: usize,
        steps: usize,
        activation: Activation,
    ) -> Result<Self> {
        let widths = Self::widths(embed_dim, feature_dim, time_dim, hidden_width, hidden_layers)?;
        let layers = widths
            .windows(2)
            .map(|w| Dense {
                weight: Array2::zeros((w[0], w[1])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Ok(Self {
            embed_dim,
            feature_dim,
            time_dim,
            steps,
            activation,
            layers,
        })
    }

    /// Rebuilds parameters from explicit layers (checkpoint loading).
    pub fn from_layers(
        embed_dim: usize,
        feature_dim: usize,
        time_dim: usize,
        steps: usize,
        activation: Activation,
        layers: Vec<Dense>,
    ) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::invalid("denoiser needs at least one hidden layer"));
        }
        let mut width = embed_dim + feature_dim + time_dim;
        for (i, layer) in layers.iter().enumerate() {
            if layer.weight.nrows() != width || layer.bias.len() != layer.weight.ncols() {
                return Err(Error::invalid(format!("layer {i} has inconsistent shape")));
            }
            width = layer.weight.ncols();
        }
        if width != embed_dim {
            return Err(Error::invalid("output layer width differs from d"));
        }
        if time_dim % 2 != 0 {
            return Err(Error::invalid("time embedding width must be even"));
        }
        Ok(Self {
            embed_dim,
            feature_dim,
            time_dim,
            steps,
            activation,
            layers,
        })
    }

    fn widths(
        embed_dim: usize,
        feature_dim: usize,
        time_dim: usize,
        hidden_width: usize,
        hidden_layers: usize,
    ) -> Result<Vec<usize>> {
        if embed_dim == 0 || feature_dim == 0 || hidden_width == 0 || hidden_layers == 0 {
            return Err(Error::invalid("denoiser dimensions must be positive"));
        }
        if time_dim % 2 != 0 {
            return Err(Error::invalid(format!("time embedding width must be even, got {time_dim}")));
        }
        let mut widths = vec![embed_dim + feature_dim + time_dim];
        widths.extend(std::iter::repeat_n(hidden_width, hidden_layers));
        widths.push(embed_dim);
        Ok(widths)
    }

    pub fn time_dim(&self) -> usize {
        self.time_dim
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn hidden_width(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn assemble_input(&self, z_t: ArrayView2<f64>, x: ArrayView2<f64>, t: &[usize]) -> Result<Array2<f64>> {
        let m = z_t.nrows();
        if z_t.ncols() != self.embed_dim || x.ncols() != self.feature_dim || x.nrows() != m || t.len() != m {
            return Err(Error::invalid(format!(
                "denoiser input mismatch: z_t {:?}, x {:?}, {} timesteps; expected widths d={}, n={}",
                z_t.dim(),
                x.dim(),
                t.len(),
                self.embed_dim,
                self.feature_dim
            )));
        }
        if let Some(&bad) = t.iter().find(|&&v| v > self.steps) {
            return Err(Error::Domain(format!("timestep {bad} exceeds T = {}", self.steps)));
        }
        let (d, n) = (self.embed_dim, self.feature_dim);
        let mut input = Array2::zeros((m, d + n + self.time_dim));
        input.slice_mut(s![.., ..d]).assign(&z_t);
        input.slice_mut(s![.., d..d + n]).assign(&x);
        let mut cached: Option<(usize, Vec<f64>)> = None;
        for (mut row, &ti) in input.axis_iter_mut(Axis(0)).zip(t) {
            let dst = &mut row.as_slice_mut().expect("row-major")[d + n..];
            match &cached {
                Some((tc, emb)) if *tc == ti => dst.copy_from_slice(emb),
                _ => {
                    fill_time_embedding(ti, dst);
                    cached = Some((ti, dst.to_vec()));
                }
            }
        }
        Ok(input)
    }

    /// Predicted clean embeddings, one row per input row; `t` is per row.
    pub fn forward(&self, z_t: ArrayView2<f64>, x: ArrayView2<f64>, t: &[usize]) -> Result<Array2<f64>> {
        let mut a = self.assemble_input(z_t, x, t)?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.weight);
            z += &layer.bias;
            if i < last {
                z.mapv_inplace(|v| self.activation.apply(v));
            }
            a = z;
        }
        Ok(a)
    }

    fn forward_cached(&self, z_t: ArrayView2<f64>, x: ArrayView2<f64>, t: &[usize]) -> Result<(Array2<f64>, ForwardCache)> {
        let mut a = self.assemble_input(z_t, x, t)?;
        let last = self.layers.len() - 1;
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(last),
        };
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.weight);
            z += &layer.bias;
            cache.inputs.push(a);
            if i < last {
                let act = z.mapv(|v| self.activation.apply(v));
                cache.pre.push(z);
                a = act;
            } else {
                a = z;
            }
        }
        Ok((a, cache))
    }

    /// Parameter gradients given `d_out = dLoss/d output`.
    fn backward(&self, cache: &ForwardCache, d_out: Array2<f64>) -> Vec<DenseGrad> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = d_out;
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = &cache.inputs[i];
            grads.push(DenseGrad {
                weight: input.t().dot(&delta),
                bias: delta.sum_axis(Axis(0)),
            });
            if i > 0 {
                let mut d_in = delta.dot(&layer.weight.t());
                ndarray::Zip::from(&mut d_in)
                    .and(&cache.pre[i - 1])
                    .for_each(|g, &z| *g *= self.activation.derivative(z));
                delta = d_in;
            }
        }
        grads.reverse();
        grads
    }

    pub(crate) fn slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers.iter_mut().flat_map(|l| {
            [
                l.weight.as_slice_mut().expect("standard layout"),
                l.bias.as_slice_mut().expect("standard layout"),
            ]
        })
    }
}

impl Denoise for DenoiserParams {
    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn predict(&self, z_t: ArrayView2<f64>, x: ArrayView2<f64>, t: usize) -> Result<Array2<f64>> {
        self.forward(z_t, x, &vec![t; z_t.nrows()])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Gradients for every trainable tensor: denoiser layers, `L` and `E`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<DenseGrad>,
    pub logits: Array2<f64>,
    pub embedding: Array2<f64>,
}

impl Gradients {
    /// Slices in the same order as the model's trainable parameters.
    pub fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .chain([
                self.logits.as_slice().expect("standard layout"),
                self.embedding.as_slice().expect("standard layout"),
            ])
    }

    pub fn is_finite(&self) -> bool {
        self.slices().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Scalar loss components of one minibatch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub diffusion: f64,
    pub class: f64,
}

/// How gradients are routed into the target-embedding head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetRouting {
    /// `E` receives gradient through the diffusion target `sqrt(d) E u / ||E u||`
    /// (with `u` detached).
    #[default]
    EmbeddingHead,
    /// Targets are fully detached; `E` is never updated.
    Detached,
}

/// Total loss of a minibatch and its exact gradient with respect to every
/// trainable parameter.
///
/// Teacher-side tensors in the batch (`u`, teacher logits, noised inputs) are
/// constants. The diffusion target is recomputed from `E` and `u` so the
/// embedding head is differentiable when `routing` allows it.
pub fn backprop(
    params: &DenoiserParams,
    heads: &HeadParams,
    batch: &TrainingBatch,
    schedule_weights: &LossWeights,
    config: &LossConfig,
    routing: TargetRouting,
) -> Result<(LossParts, Gradients)> {
    let m = batch.len();
    if schedule_weights.as_slice().len() != m {
        return Err(Error::invalid("one weight per batch item is required"));
    }
    let (pred, cache) = params.forward_cached(batch.z_t.view(), batch.x.view(), &batch.t)?;

    let (target, norms) = match routing {
        TargetRouting::EmbeddingHead => heads.target_rows(batch.u.view())?,
        TargetRouting::Detached => (batch.z0.clone(), Vec::new()),
    };

    let dif: Vec<f64> = target
        .axis_iter(Axis(0))
        .zip(pred.axis_iter(Axis(0)))
        .map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum())
        .collect();

    let student_logits = heads.logits_matrix(pred.view())?;
    let w = schedule_weights.as_slice();
    let mf = m as f64;
    let coef: Vec<f64> = w.iter().map(|wi| wi * config.lambda / mf).collect();
    let temps = Temperatures {
        tau: heads.tau,
        tau_col: heads.tau_col,
    };
    let (cls, d_logits) =
        losses::class_loss_with_grad(batch.teacher_logits.view(), student_logits.view(), temps, config, &coef)
            .map_err(|e| match e {
                Error::NumericalFailure { detail, .. } => Error::numerical("class_loss", detail),
                other => other,
            })?;

    let total = losses::total_loss(&dif, &cls, schedule_weights, config)?;
    if !total.is_finite() {
        let item = dif
            .iter()
            .zip(&cls)
            .position(|(a, b)| !(a.is_finite() && b.is_finite()))
            .unwrap_or(0);
        return Err(Error::numerical("total_loss", format!("non-finite loss at item {item}")));
    }

    // d total / d pred
    let mut d_pred = &pred - &target;
    for (mut row, wi) in d_pred.axis_iter_mut(Axis(0)).zip(w) {
        row.mapv_inplace(|v| 2.0 * wi / mf * v);
    }
    let d_target = d_pred.mapv(|v| -v);
    d_pred += &d_logits.dot(&heads.logits);
    let d_l = d_logits.t().dot(&pred);

    let d_e = match routing {
        TargetRouting::EmbeddingHead => {
            let d = heads.embed_dim() as f64;
            let mut d_e = Array2::<f64>::zeros(heads.embedding.dim());
            for (((g, z), u), norm) in d_target
                .axis_iter(Axis(0))
                .zip(target.axis_iter(Axis(0)))
                .zip(batch.u.axis_iter(Axis(0)))
                .zip(&norms)
            {
                // z = sqrt(d) v / |v| with v = E u
                let unit = z.mapv(|v| v / d.sqrt());
                let along = g.dot(&unit);
                let d_v = (&g - &(unit * along)) * (d.sqrt() / norm);
                let dv = d_v.view().insert_axis(Axis(1));
                let uu = u.insert_axis(Axis(0));
                d_e += &dv.dot(&uu);
            }
            d_e
        }
        TargetRouting::Detached => Array2::zeros(heads.embedding.dim()),
    };

    let layers = params.backward(&cache, d_pred);
    let grads = Gradients {
        layers,
        logits: d_l,
        embedding: d_e,
    };
    if !grads.is_finite() {
        return Err(Error::numerical("backprop", "non-finite gradient"));
    }
    let parts = LossParts {
        total,
        diffusion: dif.iter().sum::<f64>() / mf,
        class: cls.iter().sum::<f64>() / mf,
    };
    Ok((parts, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected adaptive moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, shapes: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let first: Vec<Vec<f64>> = shapes.into_iter().map(|s| vec![0.0; s.len()]).collect();
        let second = first.clone();
        Self {
            config,
            step: 0,
            first,
            second,
        }
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }

    /// One update; `params` and `grads` must list tensors in matching order.
    pub fn update<'p, 'g>(
        &mut self,
        params: impl IntoIterator<Item = &'p mut [f64]>,
        grads: impl IntoIterator<Item = &'g [f64]>,
    ) -> Result<()> {
        let params: Vec<&mut [f64]> = params.into_iter().collect();
        let grads: Vec<&[f64]> = grads.into_iter().collect();
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::invalid("optimizer tensor count mismatch"));
        }
        for ((p, g), m) in params.iter().zip(&grads).zip(&self.first) {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::invalid("optimizer tensor shape mismatch"));
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
