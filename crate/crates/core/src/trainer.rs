//! Teacher/student self-distillation.
//!
//! Each step, for `N` items and `B` views per item:
//! 1. the teacher runs `B` stochastic reverse chains per clean feature vector
//!    and turns each result into a probability target `u` and a target
//!    embedding `z0 = sqrt(d) E u / ||E u||`;
//! 2. the student sees a feature-dropout + Gaussian-noise corrupted copy of
//!    the features and a forward-noised `z0` at a random timestep, and predicts
//!    `z0` in one denoiser call;
//! 3. the Min-SNR weighted sum of the diffusion MSE and the regularized class
//!    loss is minimized with Adam.
//!
//! Teacher and student share one parameter set. Teacher outputs are plain
//! arrays in [`TrainingBatch`] and never receive gradients.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::FeatureDataset;
use crate::denoiser::{self, Activation, AdamConfig, AdamState, DenoiserParams, LossParts, TargetRouting};
use crate::diffusion::{self, NoiseSchedule, NoiseScale, TimeGrid};
use crate::heads::HeadParams;
use crate::inference::{self, InferenceConfig};
use crate::losses::{LossConfig, LossWeights};
use crate::metrics::EvalReport;
use crate::rng::{self, Domain, Stream};
use crate::{par, Error, Result};

/// Which features the teacher chains condition on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherInput {
    #[default]
    Clean,
    Augmented,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Number of clusters. Required.
    pub k: usize,
    /// Assignment-embedding dimension.
    pub d: usize,
    pub f2: f64,
    #[serde(flatten)]
    pub loss: LossConfig,
    pub tau: f64,
    pub tau_col: f64,
    /// Views (teacher chains / augmentations) per item.
    pub views: usize,
    /// Distinct items per minibatch.
    pub batch_n: usize,
    /// Diffusion steps `T`.
    pub steps: usize,
    pub schedule_offset: f64,
    pub eps_floor: f64,
    pub teacher_steps: usize,
    pub drop_prob: f64,
    pub sigma2_range: [f64; 2],
    pub epochs: usize,
    #[serde(flatten)]
    pub adam: AdamConfig,
    pub seed: u64,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub time_dim: usize,
    pub activation: Activation,
    pub target_routing: TargetRouting,
    pub teacher_input: TeacherInput,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 0,
            d: 64,
            f2: 25.0,
            loss: LossConfig::default(),
            tau: crate::heads::DEFAULT_TAU,
            tau_col: crate::heads::DEFAULT_TAU_COL,
            views: 4,
            batch_n: 64,
            steps: diffusion::DEFAULT_STEPS,
            schedule_offset: diffusion::DEFAULT_OFFSET,
            eps_floor: diffusion::DEFAULT_EPS_FLOOR,
            teacher_steps: 25,
            drop_prob: 0.2,
            sigma2_range: [0.1, 0.3],
            epochs: 100,
            adam: AdamConfig::default(),
            seed: 0,
            hidden_width: 512,
            hidden_layers: 2,
            time_dim: 64,
            activation: Activation::Gelu,
            target_routing: TargetRouting::EmbeddingHead,
            teacher_input: TeacherInput::Clean,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k", self.k),
            ("d", self.d),
            ("views", self.views),
            ("batch_n", self.batch_n),
            ("steps", self.steps),
            ("hidden_width", self.hidden_width),
            ("hidden_layers", self.hidden_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.teacher_steps < 2 || self.teacher_steps > self.steps + 1 {
            return Err(Error::invalid("teacher_steps must lie in [2, T + 1]"));
        }
        NoiseScale::new(self.f2)?;
        self.loss.validate()?;
        if !(self.tau > 0.0 && self.tau_col > 0.0) {
            return Err(Error::invalid("temperatures must be positive"));
        }
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(Error::invalid("drop_prob must lie in [0, 1)"));
        }
        let [lo, hi] = self.sigma2_range;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid("sigma2_range must satisfy 0 <= low <= high"));
        }
        if !(self.adam.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::invalid("time_dim must be even"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::sqrt(self.steps, self.schedule_offset, self.eps_floor)
    }
}

/// Everything needed to run the model: schedule, noise scale, denoiser and heads.
#[derive(Debug, Clone, PartialEq)]
pub struct CludiModel {
    pub config: TrainConfig,
    pub schedule: NoiseSchedule,
    pub scale: NoiseScale,
    pub denoiser: DenoiserParams,
    pub heads: HeadParams,
}

impl CludiModel {
    pub fn init(config: TrainConfig, feature_dim: usize) -> Result<Self> {
        config.validate()?;
        let mut init = rng::derive(config.seed, Domain::Init, 0, 0);
        let denoiser = DenoiserParams::new(
            config.d,
            feature_dim,
            config.time_dim,
            config.hidden_width,
            config.hidden_layers,
            config.steps,
            config.activation,
            &mut init,
        )?;
        let heads = HeadParams::new(config.k, config.d, config.tau, config.tau_col, &mut init)?;
        Ok(Self {
            schedule: config.schedule()?,
            scale: NoiseScale::new(config.f2)?,
            denoiser,
            heads,
            config,
        })
    }

    pub fn feature_dim(&self) -> usize {
        diffusion::Denoise::feature_dim(&self.denoiser)
    }

    pub fn embed_dim(&self) -> usize {
        self.config.d
    }

    pub fn clusters(&self) -> usize {
        self.heads.clusters()
    }

    fn param_slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        let heads = &mut self.heads;
        self.denoiser.slices_mut().chain([
            heads.logits.as_slice_mut().expect("standard layout"),
            heads.embedding.as_slice_mut().expect("standard layout"),
        ])
    }
}

/// Student inputs and detached teacher targets for one minibatch of `M = N·B`
/// rows, item-major (`row = i * B + b`).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    /// Augmented features seen by the student.
    pub x: Array2<f64>,
    /// Noised target embeddings fed to the student.
    pub z_t: Array2<f64>,
    /// Sampled timestep per row, in `1..=T`.
    pub t: Vec<usize>,
    /// Teacher probability targets.
    pub u: Array2<f64>,
    /// Teacher target embeddings at assembly time.
    pub z0: Array2<f64>,
    /// `L z̃` for the raw teacher chain outputs; its row softmax is `u`.
    pub teacher_logits: Array2<f64>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Feature dropout followed by additive Gaussian noise whose variance is drawn
/// once per call from `sigma2_range`.
pub fn augment_features<R: Rng + ?Sized>(x: &[f64], drop_prob: f64, sigma2_range: [f64; 2], rng: &mut R) -> Vec<f64> {
    let [lo, hi] = sigma2_range;
    let sigma = (lo + (hi - lo) * rng.random::<f64>()).sqrt();
    x.iter()
        .map(|&v| {
            let kept = if rng.random::<f64>() < drop_prob { 0.0 } else { v };
            kept + sigma * rng::std_normal(rng)
        })
        .collect()
}

/// Teacher targets: raw chain outputs, probabilities and target embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTargets {
    pub z_tilde: Array2<f64>,
    pub u: Array2<f64>,
    pub z0: Array2<f64>,
}

/// Runs `views` teacher chains per row of `x` on the coarse teacher grid.
///
/// Chain `b` of item `i` lands in row `i * views + b` and uses a stream derived
/// from `key`, so the output is independent of how rows are split across threads.
pub fn teacher_generate(model: &CludiModel, x: ArrayView2<f64>, views: usize, key: u64) -> Result<TeacherTargets> {
    let grid = TimeGrid::equally_spaced(model.schedule.steps(), model.config.teacher_steps)?;
    let rows = x.nrows() * views;
    let repeated = Array2::from_shape_fn((rows, x.ncols()), |(r, j)| x[[r / views, j]]);
    let parts = par::map_chunks(rows, |range| -> Result<Array2<f64>> {
        let mut streams: Vec<Stream> = range
            .clone()
            .map(|r| rng::derive(key, Domain::Teacher, r as u64, 0))
            .collect();
        diffusion::reverse_sample_rows(
            &model.denoiser,
            repeated.slice(ndarray::s![range, ..]),
            &grid,
            &model.schedule,
            model.scale,
            1.0,
            &mut streams,
        )
    });
    let mut z_tilde = Array2::zeros((rows, model.embed_dim()));
    let mut offset = 0;
    for part in parts {
        let part = part?;
        let n = part.nrows();
        z_tilde.slice_mut(ndarray::s![offset..offset + n, ..]).assign(&part);
        offset += n;
    }
    let u = model.heads.probs_rows(z_tilde.view())?;
    let (z0, _) = model.heads.target_rows(u.view())?;
    Ok(TeacherTargets { z_tilde, u, z0 })
}

/// One denoiser evaluation per row: predicted embeddings and probabilities.
pub fn student_forward(model: &CludiModel, batch: &TrainingBatch) -> Result<(Array2<f64>, Array2<f64>)> {
    let z_hat = model.denoiser.forward(batch.z_t.view(), batch.x.view(), &batch.t)?;
    let u_hat = model.heads.probs_rows(z_hat.view())?;
    Ok((z_hat, u_hat))
}

/// Builds a [`TrainingBatch`] from `N` clean feature rows.
pub fn assemble_batch<R: Rng + ?Sized>(model: &CludiModel, x: ArrayView2<f64>, rng: &mut R) -> Result<TrainingBatch> {
    let cfg = &model.config;
    let views = cfg.views;
    let rows = x.nrows() * views;
    let n = x.ncols();

    let mut x_aug = Array2::zeros((rows, n));
    for (r, mut dst) in x_aug.axis_iter_mut(Axis(0)).enumerate() {
        let src = x.row(r / views);
        let aug = augment_features(src.as_slice().expect("row-major"), cfg.drop_prob, cfg.sigma2_range, rng);
        dst.assign(&ndarray::ArrayView1::from(&aug));
    }

    let key: u64 = rng.random();
    let teacher = match cfg.teacher_input {
        TeacherInput::Clean => teacher_generate(model, x, views, key)?,
        TeacherInput::Augmented => {
            // each augmented view conditions exactly one chain
            teacher_generate(model, x_aug.view(), 1, key)?
        }
    };

    let t: Vec<usize> = (0..rows).map(|_| rng.random_range(1..=model.schedule.steps())).collect();
    let mut z_t = Array2::zeros((rows, cfg.d));
    for ((mut dst, z0), &ti) in z_t.axis_iter_mut(Axis(0)).zip(teacher.z0.axis_iter(Axis(0))).zip(&t) {
        let noised = diffusion::forward_noise(z0.as_slice().expect("row-major"), ti, &model.schedule, model.scale, rng)?;
        dst.assign(&ndarray::ArrayView1::from(&noised));
    }
    let teacher_logits = model.heads.logits_matrix(teacher.z_tilde.view())?;
    Ok(TrainingBatch {
        x: x_aug,
        z_t,
        t,
        u: teacher.u,
        z0: teacher.z0,
        teacher_logits,
    })
}

/// Model, optimizer and random stream of a training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: CludiModel,
    pub optimizer: AdamState,
    rng: Stream,
    steps_taken: u64,
}

/// Loss of one optimizer step.
pub type StepReport = LossParts;

impl Trainer {
    pub fn new(config: TrainConfig, feature_dim: usize) -> Result<Self> {
        Ok(Self::from_model(CludiModel::init(config, feature_dim)?))
    }

    pub fn from_model(mut model: CludiModel) -> Self {
        let optimizer = AdamState::new(model.config.adam, model.param_slices_mut().map(|s| &*s));
        let rng = rng::derive(model.config.seed, Domain::Trainer, 0, 0);
        Self {
            model,
            optimizer,
            rng,
            steps_taken: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps_taken
    }

    /// Assembles a batch from `x` and applies one optimizer update.
    pub fn step(&mut self, x: ArrayView2<f64>) -> Result<StepReport> {
        let batch = assemble_batch(&self.model, x, &mut self.rng)?;
        self.step_on(&batch)
    }

    /// One optimizer update on a pre-assembled batch.
    pub fn step_on(&mut self, batch: &TrainingBatch) -> Result<StepReport> {
        let cfg = &self.model.config;
        let weights = LossWeights::from_timesteps(&self.model.schedule, &batch.t, &cfg.loss)?;
        let (parts, grads) = denoiser::backprop(
            &self.model.denoiser,
            &self.model.heads,
            batch,
            &weights,
            &cfg.loss,
            cfg.target_routing,
        )?;
        let grads_iter = grads.slices();
        self.optimizer.update(self.model.param_slices_mut(), grads_iter)?;
        self.steps_taken += 1;
        Ok(parts)
    }

    /// One pass over `data` in shuffled minibatches; returns the mean step loss.
    pub fn epoch(&mut self, data: &FeatureDataset) -> Result<f64> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(self.model.config.batch_n) {
            let x = data.x.select(Axis(0), chunk);
            total += self.step(x.view())?.total;
            count += 1;
        }
        Ok(total / count as f64)
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub metrics: Option<EvalReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    /// Best value of each metric over all evaluated epochs, as `(nmi, acc, ari)`.
    pub fn best_metrics(&self) -> Option<(f64, f64, f64)> {
        self.epochs
            .iter()
            .filter_map(|e| e.metrics.as_ref())
            .fold(None, |acc, m| match acc {
                None => Some((m.nmi, m.acc, m.ari)),
                Some((a, b, c)) => Some((a.max(m.nmi), b.max(m.acc), c.max(m.ari))),
            })
    }

    /// CSV with header `epoch,loss,nmi,acc,ari`; missing metrics are empty cells.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "epoch,loss,nmi,acc,ari")?;
        for e in &self.epochs {
            match &e.metrics {
                Some(m) => writeln!(out, "{},{:.16e},{:.16e},{:.16e},{:.16e}", e.epoch, e.loss, m.nmi, m.acc, m.ari)?,
                None => writeln!(out, "{},{:.16e},,,", e.epoch, e.loss)?,
            }
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(file)
    }
}

/// Periodic evaluation during training.
#[derive(Debug, Clone)]
pub struct EvalSchedule<'a> {
    pub data: &'a FeatureDataset,
    pub inference: InferenceConfig,
    /// Evaluate after every `every` epochs and after the last one.
    pub every: usize,
}

/// Trains a fresh model on `data` for `config.epochs` epochs.
pub fn train(data: &FeatureDataset, config: TrainConfig) -> Result<(CludiModel, History)> {
    train_with(data, config, None, |_| {})
}

/// [`train`] with optional periodic evaluation and a per-epoch observer.
pub fn train_with(
    data: &FeatureDataset,
    config: TrainConfig,
    eval: Option<EvalSchedule<'_>>,
    mut observe: impl FnMut(&EpochRecord),
) -> Result<(CludiModel, History)> {
    if data.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    let epochs = config.epochs;
    let mut trainer = Trainer::new(config, data.dim())?;
    let mut history = History::default();
    for epoch in 1..=epochs {
        let loss = trainer.epoch(data)?;
        let metrics = match &eval {
            Some(ev) if ev.data.labels.is_some() && (epoch % ev.every.max(1) == 0 || epoch == epochs) => {
                Some(inference::evaluate(&trainer.model, ev.data, &ev.inference)?)
            }
            _ => None,
        };
        let record = EpochRecord { epoch, loss, metrics };
        observe(&record);
        history.epochs.push(record);
    }
    Ok((trainer.model, history))
}
