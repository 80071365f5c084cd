//! Noise schedule, forward noising, Min-SNR weights and the stochastic DDIM
//! reverse sampler over assignment embeddings.
//!
//! Conventions used throughout:
//! - `alpha_bar(t)` is the cumulative signal fraction, with `alpha_bar(0) == 1`.
//! - The noise scale `F²` multiplies the variance of every latent Gaussian
//!   (initial draw, reverse step, student noising) and nothing else, so the
//!   noise recovered by [`epsilon_from_prediction`] already carries the factor `F`.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::std_normal;
use crate::{Error, Result};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_OFFSET: f64 = 1e-4;
pub const DEFAULT_EPS_FLOOR: f64 = 1e-5;

/// Table of `alpha_bar(t)` for `t = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    offset: f64,
    eps_floor: f64,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// The sqrt schedule: `alpha_bar(t) = max(1 - sqrt(t/T + offset), eps_floor)` for
    /// `t >= 1`, and exactly 1 at `t = 0`.
    pub fn sqrt(steps: usize, offset: f64, eps_floor: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(offset > 0.0 && offset.is_finite()) {
            return Err(Error::invalid(format!("schedule offset must be positive, got {offset}")));
        }
        if !(eps_floor > 0.0 && eps_floor < 1.0) {
            return Err(Error::invalid(format!("eps_floor must lie in (0, 1), got {eps_floor}")));
        }
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for t in 1..=steps {
            let raw = 1.0 - (t as f64 / steps as f64 + offset).sqrt();
            alpha_bar.push(raw.max(eps_floor));
        }
        Ok(Self {
            offset,
            eps_floor,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn eps_floor(&self) -> f64 {
        self.eps_floor
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Panics if `t > T`; use [`check_t`](Self::check_t) for untrusted input.
    #[inline]
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Per-step retention `alpha_bar(t) / alpha_bar(t - 1)`.
    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_positive_t(t)?;
        Ok(self.alpha_bar[t] / self.alpha_bar[t - 1])
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(1.0 - self.alpha(t)?)
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::Domain(format!("timestep {t} exceeds T = {}", self.steps())));
        }
        Ok(())
    }

    fn check_positive_t(&self, t: usize) -> Result<()> {
        if t == 0 {
            return Err(Error::Domain("timestep 0 has infinite SNR".into()));
        }
        self.check_t(t)
    }

    /// Signal-to-noise ratio `alpha_bar / (1 - alpha_bar)`, defined for `t >= 1`.
    pub fn snr(&self, t: usize) -> Result<f64> {
        self.check_positive_t(t)?;
        let ab = self.alpha_bar[t];
        Ok(ab / (1.0 - ab))
    }

    /// Per-item loss weight `clip(SNR, gamma) / (SNR + 1)`.
    pub fn min_snr_weight(&self, t: usize, gamma: f64, mode: SnrClipMode) -> Result<f64> {
        if !(gamma > 0.0) {
            return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
        }
        let snr = self.snr(t)?;
        Ok(mode.clip(snr, gamma) / (snr + 1.0))
    }

    /// Reverse-step standard deviation (before the `F` factor) for a jump `t -> s`.
    pub fn ddim_sigma(&self, s: usize, t: usize) -> Result<f64> {
        if s >= t {
            return Err(Error::invalid(format!("reverse step needs s < t, got s={s}, t={t}")));
        }
        self.check_t(t)?;
        let (ab_s, ab_t) = (self.alpha_bar[s], self.alpha_bar[t]);
        let var = (1.0 - ab_s) / (1.0 - ab_t) * (1.0 - ab_t / ab_s);
        Ok(var.max(0.0).sqrt())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::sqrt(DEFAULT_STEPS, DEFAULT_OFFSET, DEFAULT_EPS_FLOOR).expect("default schedule is valid")
    }
}

/// How the SNR is clipped at `gamma` in the per-item weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SnrClipMode {
    #[default]
    Max,
    Min,
}

impl SnrClipMode {
    fn clip(self, snr: f64, gamma: f64) -> f64 {
        match self {
            SnrClipMode::Max => snr.max(gamma),
            SnrClipMode::Min => snr.min(gamma),
        }
    }
}

impl std::str::FromStr for SnrClipMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(SnrClipMode::Max),
            "min" => Ok(SnrClipMode::Min),
            other => Err(Error::invalid(format!("unknown snr clip mode {other:?}"))),
        }
    }
}

/// Latent variance multiplier `F²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseScale(f64);

impl NoiseScale {
    pub fn new(f2: f64) -> Result<Self> {
        if !(f2 > 0.0 && f2.is_finite()) {
            return Err(Error::invalid(format!("noise scale F² must be positive, got {f2}")));
        }
        Ok(Self(f2))
    }

    pub fn f2(self) -> f64 {
        self.0
    }

    /// Standard-deviation multiplier `F`.
    pub fn f(self) -> f64 {
        self.0.sqrt()
    }
}

impl Default for NoiseScale {
    fn default() -> Self {
        Self(25.0)
    }
}

/// Strictly decreasing timesteps ending at 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimeGrid(Vec<usize>);

impl TimeGrid {
    pub fn new(steps: Vec<usize>, total: usize) -> Result<Self> {
        if steps.len() < 2 {
            return Err(Error::invalid("time grid needs at least two points"));
        }
        if steps[0] > total {
            return Err(Error::invalid(format!("grid starts at {} > T = {total}", steps[0])));
        }
        if steps.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::invalid("time grid must be strictly decreasing"));
        }
        if *steps.last().unwrap() != 0 {
            return Err(Error::invalid("time grid must end at 0"));
        }
        Ok(Self(steps))
    }

    /// `points` rounded, equally spaced timesteps from `total` down to 0.
    pub fn equally_spaced(total: usize, points: usize) -> Result<Self> {
        if points < 2 || points > total + 1 {
            return Err(Error::invalid(format!(
                "grid size must lie in [2, {}], got {points}",
                total + 1
            )));
        }
        let gaps = points - 1;
        let steps = (0..points)
            .map(|m| (total * (gaps - m) + gaps / 2) / gaps)
            .collect();
        Self::new(steps, total)
    }

    pub fn steps(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn first(&self) -> usize {
        self.0[0]
    }

    /// Consecutive `(t, s)` pairs with `s < t`.
    pub fn jumps(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.0.windows(2).map(|w| (w[0], w[1]))
    }
}

/// Draws `z_t ~ N(sqrt(alpha_bar) z0, (1 - alpha_bar) F² I)`.
pub fn forward_noise<R: Rng + ?Sized>(
    z0: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
    scale: NoiseScale,
    rng: &mut R,
) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    let noise: Vec<f64> = (0..z0.len()).map(|_| std_normal(rng)).collect();
    forward_noise_with(z0, t, schedule, scale, &noise)
}

/// Forward noising with an explicit standard-normal vector `noise`.
pub fn forward_noise_with(
    z0: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
    scale: NoiseScale,
    noise: &[f64],
) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    if noise.len() != z0.len() {
        return Err(Error::invalid("noise and embedding dimensions differ"));
    }
    let ab = schedule.alpha_bar(t);
    let (signal, spread) = (ab.sqrt(), (1.0 - ab).sqrt() * scale.f());
    Ok(z0
        .iter()
        .zip(noise)
        .map(|(&z, &e)| signal * z + spread * e)
        .collect())
}

/// Noise implied by a clean-embedding prediction: `(z_t - sqrt(ab) z0) / sqrt(1 - ab)`.
pub fn epsilon_from_prediction(
    z_t: &[f64],
    z0_pred: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    schedule.check_positive_t(t)?;
    if z_t.len() != z0_pred.len() {
        return Err(Error::invalid("z_t and z0_pred dimensions differ"));
    }
    let ab = schedule.alpha_bar(t);
    let (signal, denom) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z_t
        .iter()
        .zip(z0_pred)
        .map(|(&z, &p)| (z - signal * p) / denom)
        .collect())
}

/// Precomputed coefficients of one reverse jump `t -> s`.
#[derive(Debug, Clone, Copy)]
struct Jump {
    signal_s: f64,
    signal_t: f64,
    spread_t: f64,
    direction: f64,
    noise_std: f64,
}

impl Jump {
    fn new(s: usize, t: usize, schedule: &NoiseSchedule, scale: NoiseScale, eta: f64) -> Result<Self> {
        let sigma = eta * schedule.ddim_sigma(s, t)?;
        let (ab_s, ab_t) = (schedule.alpha_bar(s), schedule.alpha_bar(t));
        Ok(Self {
            signal_s: ab_s.sqrt(),
            signal_t: ab_t.sqrt(),
            spread_t: (1.0 - ab_t).sqrt(),
            direction: (1.0 - ab_s - sigma * sigma).max(0.0).sqrt(),
            noise_std: scale.f() * sigma,
        })
    }

    #[inline]
    fn apply<R: Rng + ?Sized>(&self, z_t: &[f64], z0: &[f64], out: &mut [f64], rng: &mut R) {
        for ((o, &z), &p) in out.iter_mut().zip(z_t).zip(z0) {
            let eps = (z - self.signal_t * p) / self.spread_t;
            *o = self.signal_s * p + self.direction * eps;
        }
        if self.noise_std > 0.0 {
            for o in out.iter_mut() {
                *o += self.noise_std * std_normal(rng);
            }
        }
    }
}

/// One stochastic DDIM jump `t -> s`.
///
/// `eta` scales the step noise: 1 gives the stochastic sampler, 0 the
/// deterministic one. At `s = 0` the result is exactly `z0_pred`.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step<R: Rng + ?Sized>(
    z_t: &[f64],
    z0_pred: &[f64],
    s: usize,
    t: usize,
    schedule: &NoiseSchedule,
    scale: NoiseScale,
    eta: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if z_t.len() != z0_pred.len() {
        return Err(Error::invalid("z_t and z0_pred dimensions differ"));
    }
    let jump = Jump::new(s, t, schedule, scale, eta)?;
    let mut out = vec![0.0; z_t.len()];
    jump.apply(z_t, z0_pred, &mut out, rng);
    Ok(out)
}

/// A conditional network that predicts clean embeddings.
pub trait Denoise: Sync {
    fn embed_dim(&self) -> usize;
    fn feature_dim(&self) -> usize;
    /// Predicts `z0` for every row of `z_t` conditioned on the matching row of `x`,
    /// all at timestep `t`.
    fn predict(&self, z_t: ArrayView2<f64>, x: ArrayView2<f64>, t: usize) -> Result<Array2<f64>>;
}

/// Runs one reverse chain per row of `x`, row `i` drawing only from `rngs[i]`.
///
/// The chain starts from `N(0, F² I)` at the grid's first timestep and ends
/// with the denoiser's last prediction.
pub fn reverse_sample_rows<D: Denoise + ?Sized, R: Rng>(
    denoiser: &D,
    x: ArrayView2<f64>,
    grid: &TimeGrid,
    schedule: &NoiseSchedule,
    scale: NoiseScale,
    eta: f64,
    rngs: &mut [R],
) -> Result<Array2<f64>> {
    let rows = x.nrows();
    if rngs.len() != rows {
        return Err(Error::invalid("one random stream per chain is required"));
    }
    if x.ncols() != denoiser.feature_dim() {
        return Err(Error::invalid(format!(
            "feature width {} does not match denoiser input {}",
            x.ncols(),
            denoiser.feature_dim()
        )));
    }
    schedule.check_t(grid.first())?;
    let d = denoiser.embed_dim();
    let f = scale.f();
    let mut z = Array2::<f64>::zeros((rows, d));
    for (mut row, rng) in z.axis_iter_mut(Axis(0)).zip(rngs.iter_mut()) {
        row.iter_mut().for_each(|v| *v = f * std_normal(rng));
    }
    let mut next = Array2::<f64>::zeros((rows, d));
    for (t, s) in grid.jumps() {
        let z0 = denoiser.predict(z.view(), x, t)?;
        let jump = Jump::new(s, t, schedule, scale, eta)?;
        for (((zt, p), mut out), rng) in z
            .axis_iter(Axis(0))
            .zip(z0.axis_iter(Axis(0)))
            .zip(next.axis_iter_mut(Axis(0)))
            .zip(rngs.iter_mut())
        {
            jump.apply(
                zt.as_slice().expect("row-major"),
                p.as_slice().expect("row-major"),
                out.as_slice_mut().expect("row-major"),
                rng,
            );
        }
        std::mem::swap(&mut z, &mut next);
    }
    Ok(z)
}

/// Single-chain convenience wrapper over [`reverse_sample_rows`].
pub fn reverse_sample<D: Denoise + ?Sized, R: Rng>(
    denoiser: &D,
    x: &[f64],
    grid: &TimeGrid,
    schedule: &NoiseSchedule,
    scale: NoiseScale,
    eta: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let x = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::invalid(e.to_string()))?;
    let out = reverse_sample_rows(denoiser, x, grid, schedule, scale, eta, std::slice::from_mut(rng))?;
    Ok(out.into_raw_vec_and_offset().0)
}
