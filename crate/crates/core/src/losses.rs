//! Training objective: per-item diffusion MSE, the batch-regularized symmetric
//! cross-entropy over cluster probabilities, Min-SNR weights and the total.
//!
//! The regularized cross-entropy treats batch items as a random variable with a
//! uniform prior. The teacher side uses a column softmax (over the batch, per
//! class) followed by a row renormalization; the student side rescales its row
//! probabilities by `(M/K) / column sum`. Everything runs in log space with a
//! `1e-12` probability floor inside logarithms.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::diffusion::{NoiseSchedule, SnrClipMode};
use crate::{Error, Result};

/// Smallest probability allowed inside a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub snr_clip_mode: SnrClipMode,
    /// Replace the regularized loss with plain row-wise cross-entropy.
    pub naive_ce_ablation: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 50.0,
            gamma: 5.0,
            snr_clip_mode: SnrClipMode::Max,
            naive_ce_ablation: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!("gamma must be > 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Per-item weights, one per sampled timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights(Vec<f64>);

impl LossWeights {
    pub fn from_timesteps(schedule: &NoiseSchedule, timesteps: &[usize], config: &LossConfig) -> Result<Self> {
        timesteps
            .iter()
            .map(|&t| schedule.min_snr_weight(t, config.gamma, config.snr_clip_mode))
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }

    pub fn uniform(m: usize) -> Self {
        Self(vec![1.0; m])
    }

    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::invalid("loss weights must be positive and finite"));
        }
        Ok(Self(w))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `||target - pred||²`, summed over coordinates.
pub fn diffusion_loss(target: &[f64], pred: &[f64]) -> Result<f64> {
    if target.len() != pred.len() {
        return Err(Error::invalid("diffusion loss operands differ in length"));
    }
    Ok(target.iter().zip(pred).map(|(a, b)| (a - b) * (a - b)).sum())
}

fn check_finite(x: ArrayView2<f64>, component: &'static str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numerical(component, "non-finite logits"))
    }
}

fn log_sum_exp<I: IntoIterator<Item = f64> + Clone>(values: I) -> f64 {
    let max = values.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.into_iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Log of the softmax over rows (i.e. along each column) of `logits / tau_col`.
fn log_column_softmax(logits: ArrayView2<f64>, tau_col: f64) -> Array2<f64> {
    let mut out = logits.mapv(|v| v / tau_col);
    for mut col in out.axis_iter_mut(Axis(1)) {
        let lse = log_sum_exp(col.iter().copied());
        col.mapv_inplace(|v| v - lse);
    }
    out
}

/// Log of the softmax along each row of `logits / tau`.
fn log_row_softmax(logits: ArrayView2<f64>, tau: f64) -> Array2<f64> {
    let mut out = logits.mapv(|v| v / tau);
    for mut row in out.axis_iter_mut(Axis(0)) {
        let lse = log_sum_exp(row.iter().copied());
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Log of [`teacher_regularized_probs`]: row-normalized column softmax.
fn log_teacher_regularized(logits: ArrayView2<f64>, tau_col: f64) -> Result<Array2<f64>> {
    let mut out = log_column_softmax(logits, tau_col);
    for (m, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let lse = log_sum_exp(row.iter().copied());
        if !lse.is_finite() {
            return Err(Error::numerical(
                "teacher_regularized_probs",
                format!("all class conditionals vanished for item {m}"),
            ));
        }
        row.mapv_inplace(|v| v - lse);
    }
    Ok(out)
}

/// Log of [`student_regularized_probs`] given log row probabilities.
fn log_student_regularized(log_probs: &Array2<f64>) -> Result<Array2<f64>> {
    let (m, k) = log_probs.dim();
    let prior = (m as f64 / k as f64).ln();
    let mut out = log_probs.clone();
    for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
        let lse = log_sum_exp(col.iter().copied());
        if !lse.is_finite() {
            return Err(Error::numerical(
                "student_regularized_probs",
                format!("class {j} has zero total probability"),
            ));
        }
        col.mapv_inplace(|v| prior + v - lse);
    }
    Ok(out)
}

/// Column `k` is the softmax over batch items of `logits[., k] / tau_col`.
pub fn column_softmax(logits: ArrayView2<f64>, tau_col: f64) -> Result<Array2<f64>> {
    if logits.nrows() == 0 {
        return Err(Error::invalid("column softmax needs at least one row"));
    }
    check_finite(logits, "column_softmax")?;
    Ok(log_column_softmax(logits, tau_col).mapv(f64::exp))
}

/// Class posteriors from the column-softmax conditionals under a uniform class prior.
pub fn teacher_regularized_probs(logits: ArrayView2<f64>, tau_col: f64) -> Result<Array2<f64>> {
    if logits.nrows() == 0 {
        return Err(Error::invalid("need at least one row"));
    }
    check_finite(logits, "teacher_regularized_probs")?;
    Ok(log_teacher_regularized(logits, tau_col)?.mapv(f64::exp))
}

/// Entry `(m, k) = (M/K) p[m, k] / sum_m' p[m', k]`.
pub fn student_regularized_probs(probs: ArrayView2<f64>) -> Result<Array2<f64>> {
    let (m, k) = probs.dim();
    if m == 0 || k == 0 {
        return Err(Error::invalid("empty probability matrix"));
    }
    let mut out = probs.to_owned();
    let scale = m as f64 / k as f64;
    for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
        let sum: f64 = col.sum();
        if !(sum > 0.0) {
            return Err(Error::numerical(
                "student_regularized_probs",
                format!("class {j} has zero total probability"),
            ));
        }
        col.mapv_inplace(|v| scale * v / sum);
    }
    Ok(out)
}

fn floor_log(v: f64) -> f64 {
    v.max(PROB_FLOOR.ln())
}

/// Temperatures of the two softmax heads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperatures {
    pub tau: f64,
    pub tau_col: f64,
}

/// Per-item classification losses, and optionally the gradient of
/// `sum_m coef[m] * loss[m]` with respect to the student logits.
///
/// Teacher logits are treated as constants.
fn class_loss_impl(
    teacher_logits: ArrayView2<f64>,
    student_logits: ArrayView2<f64>,
    temps: Temperatures,
    config: &LossConfig,
    coef: Option<&[f64]>,
) -> Result<(Vec<f64>, Option<Array2<f64>>)> {
    let (m, k) = teacher_logits.dim();
    if student_logits.dim() != (m, k) {
        return Err(Error::invalid(format!(
            "teacher logits {:?} and student logits {:?} differ in shape",
            teacher_logits.dim(),
            student_logits.dim()
        )));
    }
    if m == 0 || k == 0 {
        return Err(Error::invalid("class loss needs a non-empty batch"));
    }
    if let Some(c) = coef {
        if c.len() != m {
            return Err(Error::invalid("one coefficient per item is required"));
        }
    }
    check_finite(teacher_logits, "class_loss")?;
    check_finite(student_logits, "class_loss")?;
    let Temperatures { tau, tau_col } = temps;
    let floor = PROB_FLOOR.ln();

    // Student row log-probabilities.
    let log_p = log_row_softmax(student_logits, tau);

    if config.naive_ce_ablation {
        let log_u = log_row_softmax(teacher_logits, tau);
        let mut loss = vec![0.0; m];
        for i in 0..m {
            loss[i] = -(0..k).map(|j| log_u[[i, j]].exp() * floor_log(log_p[[i, j]])).sum::<f64>();
        }
        let grad = coef.map(|c| {
            let mut g = Array2::zeros((m, k));
            for i in 0..m {
                for j in 0..k {
                    if log_p[[i, j]] > floor {
                        g[[i, j]] = -c[i] * log_u[[i, j]].exp();
                    }
                }
            }
            row_softmax_backward(&g, &log_p, tau)
        });
        return Ok((loss, grad));
    }

    // First term: teacher posterior (column softmax, row-normalized) against
    // the student's prior-rescaled probabilities.
    let log_q = log_teacher_regularized(teacher_logits, tau_col)?;
    let log_s_hat = log_student_regularized(&log_p)?;
    // Second term: roles swapped.
    let log_r = log_teacher_regularized(student_logits, tau_col)?;
    let log_u = log_row_softmax(teacher_logits, tau);
    let log_q_prime = log_student_regularized(&log_u)?;

    let mut loss = vec![0.0; m];
    for i in 0..m {
        let mut first = 0.0;
        let mut second = 0.0;
        for j in 0..k {
            first -= log_q[[i, j]].exp() * floor_log(log_s_hat[[i, j]]);
            second -= log_r[[i, j]].exp() * floor_log(log_q_prime[[i, j]]);
        }
        loss[i] = 0.5 * (first + second);
    }
    if loss.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("class_loss", "non-finite loss"));
    }

    let grad = match coef {
        None => None,
        Some(c) => {
            let half: Vec<f64> = c.iter().map(|v| 0.5 * v).collect();

            // d/d log_p through log_s_hat = log(M/K) + log_p - log colsum(p).
            let mut col_weight = vec![0.0; k];
            let mut g = Array2::<f64>::zeros((m, k));
            for i in 0..m {
                for j in 0..k {
                    if log_s_hat[[i, j]] > floor {
                        let w = half[i] * log_q[[i, j]].exp();
                        g[[i, j]] -= w;
                        col_weight[j] += w;
                    }
                }
            }
            for j in 0..k {
                let lse = log_sum_exp(log_p.column(j).iter().copied());
                for i in 0..m {
                    g[[i, j]] += col_weight[j] * (log_p[[i, j]] - lse).exp();
                }
            }
            let mut d_student = row_softmax_backward(&g, &log_p, tau);

            // Second term through r = rownorm(colsoftmax(S / tau_col)).
            let log_col = log_column_softmax(student_logits, tau_col);
            let mut v = Array2::<f64>::zeros((m, k));
            for i in 0..m {
                let h: Vec<f64> = (0..k).map(|j| -half[i] * floor_log(log_q_prime[[i, j]])).collect();
                let hr: f64 = (0..k).map(|j| h[j] * log_r[[i, j]].exp()).sum();
                for j in 0..k {
                    v[[i, j]] = log_r[[i, j]].exp() * (h[j] - hr);
                }
            }
            for j in 0..k {
                let vs: f64 = v.column(j).sum();
                for i in 0..m {
                    d_student[[i, j]] += (v[[i, j]] - log_col[[i, j]].exp() * vs) / tau_col;
                }
            }
            Some(d_student)
        }
    };
    Ok((loss, grad))
}

/// Backward pass of `log_p = log_softmax(S / tau)` row-wise, given `g = dG/d log_p`.
fn row_softmax_backward(g: &Array2<f64>, log_p: &Array2<f64>, tau: f64) -> Array2<f64> {
    let mut out = g.clone();
    for (mut row, lp) in out.axis_iter_mut(Axis(0)).zip(log_p.axis_iter(Axis(0))) {
        let total: f64 = row.sum();
        for (o, &l) in row.iter_mut().zip(lp.iter()) {
            *o = (*o - l.exp() * total) / tau;
        }
    }
    out
}

/// Per-item symmetric regularized cross-entropy (or plain cross-entropy under
/// the ablation flag) between teacher and student logits.
pub fn class_loss(
    teacher_logits: ArrayView2<f64>,
    student_logits: ArrayView2<f64>,
    temps: Temperatures,
    config: &LossConfig,
) -> Result<Vec<f64>> {
    class_loss_impl(teacher_logits, student_logits, temps, config, None).map(|(l, _)| l)
}

/// [`class_loss`] plus the gradient of `sum_m coef[m] * loss[m]` with respect
/// to the student logits.
pub fn class_loss_with_grad(
    teacher_logits: ArrayView2<f64>,
    student_logits: ArrayView2<f64>,
    temps: Temperatures,
    config: &LossConfig,
    coef: &[f64],
) -> Result<(Vec<f64>, Array2<f64>)> {
    let (loss, grad) = class_loss_impl(teacher_logits, student_logits, temps, config, Some(coef))?;
    Ok((loss, grad.expect("gradient requested")))
}

/// `(1/M) sum_m w_m (dif_m + lambda cls_m)`.
pub fn total_loss(dif: &[f64], cls: &[f64], weights: &LossWeights, config: &LossConfig) -> Result<f64> {
    let m = dif.len();
    if cls.len() != m || weights.0.len() != m {
        return Err(Error::invalid(format!(
            "length mismatch: {} diffusion terms, {} class terms, {} weights",
            m,
            cls.len(),
            weights.0.len()
        )));
    }
    if m == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let sum: f64 = dif
        .iter()
        .zip(cls)
        .zip(&weights.0)
        .map(|((d, c), w)| w * (d + config.lambda * c))
        .sum();
    Ok(sum / m as f64)
}
