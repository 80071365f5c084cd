//! Browser bindings: schedule curves, a trainable 2-D mixture, and a
//! per-chain view of how one point gets classified.

use cludi_core::data::generate_mixture;
use cludi_core::diffusion::{self, NoiseSchedule, SnrClipMode, TimeGrid};
use cludi_core::inference::{classify, classify_batch, InferenceConfig};
use cludi_core::metrics::{accuracy_hungarian, Labeling};
use cludi_core::rng;
use cludi_core::trainer::{TrainConfig, Trainer};
use cludi_core::{FeatureDataset, MixtureSpec};
use ndarray::Array2;
use wasm_bindgen::prelude::*;

fn js(e: cludi_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// `[ᾱ_0..ᾱ_T, w_0..w_T]` for a `steps`-step sqrt schedule. `w_0` is reported
/// as `gamma` because the SNR is unbounded there.
#[wasm_bindgen]
pub fn schedule_curves(steps: usize, gamma: f64, clip_max: bool) -> Result<Vec<f64>, JsError> {
    let schedule = NoiseSchedule::sqrt(steps, 1e-4, 1e-5).map_err(js)?;
    let mode = if clip_max { SnrClipMode::Max } else { SnrClipMode::Min };
    let mut out = schedule.alpha_bars().to_vec();
    out.push(gamma);
    for t in 1..=steps {
        out.push(schedule.min_snr_weight(t, gamma, mode).map_err(js)?);
    }
    Ok(out)
}

/// A 2-D Gaussian mixture plus a model being trained on it.
#[wasm_bindgen]
pub struct Demo {
    data: FeatureDataset,
    trainer: Trainer,
    epochs: usize,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(k: usize, per_component: usize, radius: f64, noise: f64, f2: f64, seed: u64) -> Result<Demo, JsError> {
        let spec = MixtureSpec {
            k,
            dim: 2,
            per_component,
            center_radius: radius,
            noise_std: noise,
            seed,
        };
        let data = generate_mixture(&spec).map_err(js)?;
        let config = TrainConfig {
            k,
            d: 8,
            f2,
            views: 2,
            batch_n: 64,
            steps: 200,
            teacher_steps: 10,
            hidden_width: 32,
            time_dim: 8,
            seed,
            ..TrainConfig::default()
        };
        let trainer = Trainer::new(config, 2).map_err(js)?;
        Ok(Demo { data, trainer, epochs: 0 })
    }

    /// Flat `[x0, y0, x1, y1, ...]`.
    pub fn points(&self) -> Vec<f64> {
        self.data.x.iter().copied().collect()
    }

    pub fn true_labels(&self) -> Vec<u32> {
        self.data
            .labels
            .as_ref()
            .map(|l| l.as_slice().iter().map(|&v| v as u32).collect())
            .unwrap_or_default()
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    /// Runs `n` more epochs and returns the last epoch's mean loss.
    pub fn train(&mut self, n: usize) -> Result<f64, JsError> {
        let mut loss = f64::NAN;
        for _ in 0..n {
            loss = self.trainer.epoch(&self.data).map_err(js)?;
            self.epochs += 1;
        }
        Ok(loss)
    }

    /// Predicted label per point, followed by the matched accuracy as the
    /// final element (scaled by 1e6 and rounded).
    pub fn classify_all(&self, b: usize, steps: usize, seed: u64) -> Result<Vec<u32>, JsError> {
        let cfg = InferenceConfig { b, steps, seed, eta: 1.0 };
        let pred = classify_batch(&self.trainer.model, self.data.x.view(), &cfg).map_err(js)?;
        let mut out: Vec<u32> = pred.labels.iter().map(|&v| v as u32).collect();
        let acc = match &self.data.labels {
            Some(truth) => {
                let labeling = Labeling::new(pred.labels).map_err(js)?;
                accuracy_hungarian(&labeling, truth).map_err(js)?
            }
            None => 0.0,
        };
        out.push((acc * 1e6).round() as u32);
        Ok(out)
    }

    /// Cluster probabilities of each of `b` chains for the point `(x, y)`,
    /// flat `b × K`, followed by the `K` averaged probabilities.
    pub fn chain_probs(&self, x: f64, y: f64, b: usize, steps: usize, seed: u64) -> Result<Vec<f64>, JsError> {
        let model = &self.trainer.model;
        let cfg = InferenceConfig { b, steps, seed, eta: 1.0 };
        let (mean, _, samples) = classify(model, &[x, y], &cfg, 0).map_err(js)?;
        let per_chain = model.heads.probs_rows(samples.view()).map_err(js)?;
        let mut out: Vec<f64> = per_chain.iter().copied().collect();
        out.extend_from_slice(mean.as_slice());
        Ok(out)
    }

    /// Argmax cluster of one reverse chain at every cell of a `res × res`
    /// grid spanning `[-extent, extent]²`.
    pub fn decision_map(&self, res: usize, extent: f64, steps: usize, seed: u64) -> Result<Vec<u32>, JsError> {
        let model = &self.trainer.model;
        let step = 2.0 * extent / res.max(1) as f64;
        let x = Array2::from_shape_fn((res * res, 2), |(i, j)| {
            let cell = if j == 0 { i % res } else { i / res };
            -extent + (cell as f64 + 0.5) * step
        });
        let grid = TimeGrid::equally_spaced(model.schedule.steps(), steps).map_err(js)?;
        let mut streams: Vec<_> = (0..res * res).map(|i| rng::derive(seed, rng::Domain::Inference, i as u64, 0)).collect();
        let z = diffusion::reverse_sample_rows(&model.denoiser, x.view(), &grid, &model.schedule, model.scale, 0.0, &mut streams)
            .map_err(js)?;
        let probs = model.heads.probs_rows(z.view()).map_err(js)?;
        Ok(probs
            .rows()
            .into_iter()
            .map(|r| cludi_core::heads::argmax(r.as_slice().expect("row-major")) as u32)
            .collect())
    }
}
