//! Monte-Carlo classification: `B` independent reverse chains per input,
//! cluster probabilities averaged over chains.
//!
//! Chain `c` of item `i` draws from a stream derived from `(seed, i, c)`, so
//! results do not depend on batching or thread count.

use std::io::Write;

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::FeatureDataset;
use crate::diffusion::{self, TimeGrid};
use crate::heads::{argmax, ClusterProbs};
use crate::metrics::{self, EvalReport};
use crate::rng::{self, Domain, Stream};
use crate::trainer::CludiModel;
use crate::{par, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// Chains per input.
    pub b: usize,
    /// Points on the reverse time grid.
    pub steps: usize,
    pub seed: u64,
    /// Reverse-step noise multiplier (1 = stochastic sampler, 0 = deterministic).
    pub eta: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            b: 8,
            steps: 100,
            seed: 0,
            eta: 1.0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self, total_steps: usize) -> Result<()> {
        if self.b == 0 {
            return Err(Error::invalid("need at least one chain per input"));
        }
        if self.steps < 2 || self.steps > total_steps + 1 {
            return Err(Error::invalid(format!(
                "inference grid size must lie in [2, {}], got {}",
                total_steps + 1,
                self.steps
            )));
        }
        Ok(())
    }
}

/// Batch classification output.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `N × K` averaged cluster probabilities.
    pub probs: Array2<f64>,
    pub labels: Vec<usize>,
    /// `N × d` per-item mean of the sampled embeddings.
    pub embeddings: Array2<f64>,
}

/// Raw chain outputs for items `first..first + x.nrows()`, row `i * B + c`.
fn sample_chains(model: &CludiModel, x: ArrayView2<f64>, first: usize, config: &InferenceConfig) -> Result<Array2<f64>> {
    config.validate(model.schedule.steps())?;
    if x.ncols() != model.feature_dim() {
        return Err(Error::invalid(format!(
            "features have width {}, model expects {}",
            x.ncols(),
            model.feature_dim()
        )));
    }
    let grid = TimeGrid::equally_spaced(model.schedule.steps(), config.steps)?;
    let b = config.b;
    let rows = x.nrows() * b;
    let parts = par::map_chunks(rows, |range| -> Result<Array2<f64>> {
        let xr = Array2::from_shape_fn((range.len(), x.ncols()), |(r, j)| x[[(range.start + r) / b, j]]);
        let mut streams: Vec<Stream> = range
            .clone()
            .map(|r| rng::derive(config.seed, Domain::Inference, (first + r / b) as u64, (r % b) as u64))
            .collect();
        diffusion::reverse_sample_rows(&model.denoiser, xr.view(), &grid, &model.schedule, model.scale, config.eta, &mut streams)
    });
    let mut out = Array2::zeros((rows, model.embed_dim()));
    let mut offset = 0;
    for part in parts {
        let part = part?;
        out.slice_mut(s![offset..offset + part.nrows(), ..]).assign(&part);
        offset += part.nrows();
    }
    Ok(out)
}

/// Classifies one feature vector treated as item number `item`.
///
/// Returns the averaged probabilities, the argmax label (ties to the lowest
/// index) and the `B × d` raw samples.
pub fn classify(
    model: &CludiModel,
    x: &[f64],
    config: &InferenceConfig,
    item: usize,
) -> Result<(ClusterProbs, usize, Array2<f64>)> {
    let view = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::invalid(e.to_string()))?;
    let samples = sample_chains(model, view, item, config)?;
    let probs = model.heads.probs_rows(samples.view())?;
    let mean = probs.mean_axis(Axis(0)).expect("at least one chain").to_vec();
    let label = argmax(&mean);
    Ok((ClusterProbs::from_raw(mean), label, samples))
}

/// Classifies every row; row `i` is item `i`.
pub fn classify_batch(model: &CludiModel, x: ArrayView2<f64>, config: &InferenceConfig) -> Result<Prediction> {
    if x.nrows() == 0 {
        return Err(Error::invalid("cannot classify an empty dataset"));
    }
    let samples = sample_chains(model, x, 0, config)?;
    let chain_probs = model.heads.probs_rows(samples.view())?;
    let (n, b) = (x.nrows(), config.b);
    let mut probs = Array2::zeros((n, model.clusters()));
    let mut embeddings = Array2::zeros((n, model.embed_dim()));
    for i in 0..n {
        let rows = s![i * b..(i + 1) * b, ..];
        probs.row_mut(i).assign(&chain_probs.slice(rows).mean_axis(Axis(0)).expect("b >= 1"));
        embeddings.row_mut(i).assign(&samples.slice(rows).mean_axis(Axis(0)).expect("b >= 1"));
    }
    let labels = probs
        .axis_iter(Axis(0))
        .map(|row| argmax(row.as_slice().expect("row-major")))
        .collect();
    Ok(Prediction {
        probs,
        labels,
        embeddings,
    })
}

/// Per-item mean of the `B` sampled embeddings.
pub fn export_embeddings(model: &CludiModel, x: ArrayView2<f64>, config: &InferenceConfig) -> Result<Array2<f64>> {
    Ok(classify_batch(model, x, config)?.embeddings)
}

/// Classifies a labelled dataset and scores it.
pub fn evaluate(model: &CludiModel, data: &FeatureDataset, config: &InferenceConfig) -> Result<EvalReport> {
    let truth = data
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("evaluation needs ground-truth labels"))?;
    let pred = classify_batch(model, data.x.view(), config)?;
    EvalReport::compute(&metrics::Labeling::new(pred.labels)?, truth, config.seed)
}

impl Prediction {
    /// CSV: `label,p0,...,p{K-1}`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let k = self.probs.ncols();
        let header: Vec<String> = std::iter::once("label".to_string())
            .chain((0..k).map(|j| format!("p{j}")))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for (label, row) in self.labels.iter().zip(self.probs.axis_iter(Axis(0))) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(out, "{label},{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// CSV: `z0,...,z{d-1}`, one row per item.
pub fn write_embeddings_csv<W: Write>(embeddings: &Array2<f64>, mut out: W) -> Result<()> {
    let header: Vec<String> = (0..embeddings.ncols()).map(|j| format!("z{j}")).collect();
    writeln!(out, "{}", header.join(","))?;
    for row in embeddings.axis_iter(Axis(0)) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::TrainConfig;

    fn model() -> CludiModel {
        let cfg = TrainConfig {
            k: 3,
            d: 4,
            steps: 50,
            hidden_width: 8,
            time_dim: 4,
            seed: 1,
            ..TrainConfig::default()
        };
        CludiModel::init(cfg, 5).unwrap()
    }

    fn inputs() -> Array2<f64> {
        Array2::from_shape_fn((7, 5), |(i, j)| (i as f64 - 3.0) * 0.4 + j as f64 * 0.1)
    }

    #[test]
    fn single_chain_is_its_own_average() {
        let m = model();
        let cfg = InferenceConfig {
            b: 1,
            steps: 10,
            ..InferenceConfig::default()
        };
        let x = inputs();
        let (p, label, samples) = classify(&m, x.row(2).as_slice().unwrap(), &cfg, 2).unwrap();
        let direct = m.heads.cluster_probs(samples.row(0).as_slice().unwrap()).unwrap();
        assert_eq!(p.as_slice(), direct.as_slice());
        assert_eq!(label, direct.argmax());
    }

    #[test]
    fn batch_matches_single_and_is_deterministic() {
        let m = model();
        let cfg = InferenceConfig {
            b: 4,
            steps: 10,
            seed: 5,
            ..InferenceConfig::default()
        };
        let x = inputs();
        let batch = classify_batch(&m, x.view(), &cfg).unwrap();
        assert_eq!(batch.labels.len(), 7);
        assert_eq!(batch, classify_batch(&m, x.view(), &cfg).unwrap());
        for i in [0, 3, 6] {
            let (p, label, _) = classify(&m, x.row(i).as_slice().unwrap(), &cfg, i).unwrap();
            assert_eq!(label, batch.labels[i]);
            for (a, b) in p.as_slice().iter().zip(batch.probs.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        for row in batch.probs.axis_iter(Axis(0)) {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn averaged_embedding_is_within_sample_norms() {
        let m = model();
        let cfg = InferenceConfig {
            b: 6,
            steps: 10,
            ..InferenceConfig::default()
        };
        let x = inputs();
        let (_, _, samples) = classify(&m, x.row(0).as_slice().unwrap(), &cfg, 0).unwrap();
        let emb = export_embeddings(&m, x.view(), &cfg).unwrap();
        assert_eq!(emb.ncols(), 4);
        let mean = emb.row(0);
        let max_norm = samples
            .axis_iter(Axis(0))
            .map(|r| r.dot(&r).sqrt())
            .fold(0.0, f64::max);
        assert!(mean.dot(&mean).sqrt() <= max_norm + 1e-12);
        let one = InferenceConfig { b: 1, ..cfg };
        let (_, _, s1) = classify(&m, x.row(0).as_slice().unwrap(), &one, 0).unwrap();
        assert_eq!(export_embeddings(&m, x.view(), &one).unwrap().row(0), s1.row(0));
    }

    #[test]
    fn rejects_bad_config() {
        let m = model();
        let x = inputs();
        assert!(classify_batch(&m, x.view(), &InferenceConfig { b: 0, ..Default::default() }).is_err());
        assert!(classify_batch(&m, x.view(), &InferenceConfig { steps: 52, ..Default::default() }).is_err());
        assert!(classify_batch(&m, Array2::zeros((0, 5)).view(), &InferenceConfig::default()).is_err());
    }
}
