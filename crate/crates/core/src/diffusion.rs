//! DDPM noise schedules, forward noising, the reverse-step contract,
//! the training loss evaluator, and the strided ancestral sampler.
//!
//! The reverse step predicts the previous noisy latent directly
//! (`z_{n-1}` from `z_n`), not the injected noise. [`EpsilonAdapter`] wraps a
//! noise predictor into that contract through the DDPM posterior.

use ndarray::{Array3, Zip};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, S2skError};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_INFERENCE_STEPS: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear { beta_start: f64, beta_end: f64 },
    Cosine { offset: f64 },
}

impl Default for ScheduleKind {
    fn default() -> Self {
        ScheduleKind::Linear {
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub kind: ScheduleKind,
    /// `alpha_bar[0] = 1`, strictly decreasing, length `steps + 1`.
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps == 0 {
            return Err(S2skError::invalid("noise schedule needs at least one step"));
        }
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        match kind {
            ScheduleKind::Linear { beta_start, beta_end } => {
                if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
                    return Err(S2skError::invalid(format!(
                        "linear betas must satisfy 0 < {beta_start} <= {beta_end} < 1"
                    )));
                }
                let mut prod = 1.0;
                for i in 0..steps {
                    let beta = if steps == 1 {
                        beta_start
                    } else {
                        beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                    };
                    prod *= 1.0 - beta;
                    alpha_bar.push(prod);
                }
            }
            ScheduleKind::Cosine { offset } => {
                if offset <= 0.0 {
                    return Err(S2skError::invalid("cosine schedule offset must be positive"));
                }
                let f = |t: f64| ((t + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2).cos().powi(2);
                let f0 = f(0.0);
                let mut prev = 1.0;
                for n in 1..=steps {
                    let raw = f(n as f64 / steps as f64) / f0;
                    // Clip beta at 0.999 so the last step keeps positive signal.
                    let beta = (1.0 - raw / prev).clamp(0.0, 0.999);
                    prev *= 1.0 - beta;
                    alpha_bar.push(prev);
                }
            }
        }
        for n in 1..alpha_bar.len() {
            if !(alpha_bar[n] < alpha_bar[n - 1] && alpha_bar[n] > 0.0) {
                return Err(S2skError::invalid(format!(
                    "schedule not strictly decreasing in (0, 1] at step {n}"
                )));
            }
        }
        Ok(NoiseSchedule { steps, kind, alpha_bar })
    }

    pub fn linear_default() -> Self {
        NoiseSchedule::new(DEFAULT_STEPS, ScheduleKind::default()).expect("default schedule is valid")
    }

    pub fn alpha_bar(&self, n: usize) -> f64 {
        self.alpha_bar[n]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub(crate) fn check_step(&self, n: usize) -> Result<()> {
        if n > self.steps {
            return Err(S2skError::invalid(format!(
                "diffusion step {n} outside [0, {}]",
                self.steps
            )));
        }
        Ok(())
    }

    /// Strictly decreasing steps `N = t_k > ... > t_0 = 0` with uniform stride.
    pub fn strided_steps(&self, n_infer: usize) -> Result<Vec<usize>> {
        if n_infer == 0 || n_infer > self.steps {
            return Err(S2skError::invalid(format!(
                "inference steps {n_infer} must lie in [1, {}]",
                self.steps
            )));
        }
        Ok((0..=n_infer)
            .rev()
            .map(|k| ((self.steps * k) as f64 / n_infer as f64).round() as usize)
            .collect())
    }
}

/// Draws a standard-normal array of the given shape.
pub fn standard_normal(shape: (usize, usize, usize), rng: &mut dyn RngCore) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

/// `sqrt(abar_n) z0 + sqrt(1 - abar_n) eps` with an explicit noise draw.
pub fn forward_noise_with(z0: &Array3<f64>, n: usize, schedule: &NoiseSchedule, eps: &Array3<f64>) -> Result<Array3<f64>> {
    schedule.check_step(n)?;
    if eps.dim() != z0.dim() {
        return Err(S2skError::shape("noise and latent shapes differ"));
    }
    if n == 0 {
        return Ok(z0.clone());
    }
    let a = schedule.alpha_bar(n);
    let (s, t) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(Zip::from(z0).and(eps).map_collect(|&z, &e| s * z + t * e))
}

pub fn forward_noise(z0: &Array3<f64>, n: usize, schedule: &NoiseSchedule, rng: &mut dyn RngCore) -> Result<Array3<f64>> {
    schedule.check_step(n)?;
    if n == 0 {
        return Ok(z0.clone());
    }
    let eps = standard_normal(z0.dim(), rng);
    forward_noise_with(z0, n, schedule, &eps)
}

/// The two most recent states the reverse step is conditioned on.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning<'a> {
    /// `ZX^t`
    pub latest: &'a Array3<f64>,
    /// `ZX^{t-1}`
    pub previous: &'a Array3<f64>,
}

/// Reverse step: maps the noisy latent at step `from` to step `to < from`.
pub trait Denoiser: Send + Sync {
    fn step(
        &self,
        noisy: &Array3<f64>,
        from: usize,
        to: usize,
        cond: &Conditioning<'_>,
        rng: &mut dyn RngCore,
    ) -> Result<Array3<f64>>;

    /// Specialises the denoiser to one conditioning window, so work that
    /// depends only on the window runs once per sample instead of once per
    /// reverse step. The bound denoiser must produce exactly what `step`
    /// would for the same window.
    fn bind<'s>(&'s self, _cond: &Conditioning<'_>) -> Result<Option<Box<dyn Denoiser + 's>>> {
        Ok(None)
    }
}

/// Training objective for one diffusion step `n`.
///
/// Target `z_{n-1}` and input `z_n` lie on a single forward trajectory:
/// `z_{n-1} = sqrt(abar_{n-1}) z0 + sqrt(1 - abar_{n-1}) eps` and
/// `z_n = sqrt(abar_n / abar_{n-1}) z_{n-1} + sqrt(1 - abar_n / abar_{n-1}) eta`,
/// with `eps` then `eta` drawn from `rng` in that order.
pub fn ddpm_loss(
    z_true: &Array3<f64>,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    n: usize,
    cond: &Conditioning<'_>,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    if n == 0 || n > schedule.steps {
        return Err(S2skError::invalid(format!(
            "loss step {n} outside [1, {}]",
            schedule.steps
        )));
    }
    let target = forward_noise(z_true, n - 1, schedule, rng)?;
    let ratio = schedule.alpha_bar(n) / schedule.alpha_bar(n - 1);
    let eta = standard_normal(z_true.dim(), rng);
    let (s, t) = (ratio.sqrt(), (1.0 - ratio).sqrt());
    let input = Zip::from(&target).and(&eta).map_collect(|&z, &e| s * z + t * e);
    let pred = denoiser.step(&input, n, n - 1, cond, rng)?;
    if pred.dim() != target.dim() {
        return Err(S2skError::shape("denoiser output shape differs from its input"));
    }
    let sq: f64 = Zip::from(&pred).and(&target).fold(0.0, |acc, &p, &q| acc + (p - q) * (p - q));
    Ok(sq / target.len() as f64)
}

#[derive(Debug, Clone)]
pub struct DiffusionSample {
    pub latent: Array3<f64>,
    pub member_id: usize,
    /// Latents after each reverse step, first entry the Gaussian start.
    pub step_trace: Option<Vec<Array3<f64>>>,
}

/// Strided ancestral sampling from a standard-normal start at step `N`.
pub fn sample(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    shape: (usize, usize, usize),
    cond: &Conditioning<'_>,
    rng: &mut dyn RngCore,
    n_infer: usize,
    member_id: usize,
    keep_trace: bool,
) -> Result<DiffusionSample> {
    schedule.strided_steps(n_infer)?;
    let start = standard_normal(shape, rng);
    sample_from(start, denoiser, schedule, cond, rng, n_infer, member_id, keep_trace)
}

/// As [`sample`], from an explicit start latent.
#[allow(clippy::too_many_arguments)]
pub fn sample_from(
    start: Array3<f64>,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cond: &Conditioning<'_>,
    rng: &mut dyn RngCore,
    n_infer: usize,
    member_id: usize,
    keep_trace: bool,
) -> Result<DiffusionSample> {
    let steps = schedule.strided_steps(n_infer)?;
    let bound = denoiser.bind(cond)?;
    let denoiser = bound.as_deref().unwrap_or(denoiser);
    let mut z = start;
    let mut trace = keep_trace.then(|| vec![z.clone()]);
    for pair in steps.windows(2) {
        z = denoiser.step(&z, pair[0], pair[1], cond, rng)?;
        if let Some(t) = trace.as_mut() {
            t.push(z.clone());
        }
    }
    Ok(DiffusionSample {
        latent: z,
        member_id,
        step_trace: trace,
    })
}

/// Posterior `q(z_to | z_from, x0)` of the forward process: `(coef_x0, coef_z, variance)`.
pub fn posterior_coefficients(schedule: &NoiseSchedule, from: usize, to: usize) -> (f64, f64, f64) {
    let a_from = schedule.alpha_bar(from);
    let a_to = schedule.alpha_bar(to);
    let ratio = a_from / a_to;
    let denom = 1.0 - a_from;
    let coef_x0 = a_to.sqrt() * (1.0 - ratio) / denom;
    let coef_z = ratio.sqrt() * (1.0 - a_to) / denom;
    let var = (1.0 - a_to) / denom * (1.0 - ratio);
    (coef_x0, coef_z, var.max(0.0))
}

/// Draws `z_to` from the forward posterior given an estimate of the clean latent.
pub fn posterior_step(
    schedule: &NoiseSchedule,
    from: usize,
    to: usize,
    x0: &Array3<f64>,
    noisy: &Array3<f64>,
    rng: &mut dyn RngCore,
) -> Array3<f64> {
    let (cx, cz, var) = posterior_coefficients(schedule, from, to);
    let sd = var.sqrt();
    let mut out = Zip::from(x0).and(noisy).map_collect(|&x, &z| cx * x + cz * z);
    if sd > 0.0 {
        out.mapv_inplace(|v| v + sd * rng.sample::<f64, _>(StandardNormal));
    }
    out
}

/// Exact conditional law of `z_to` given `z_from` when every clean element is
/// `N(mu, sigma^2)`: returns `(mean_offset, gain, variance)` with
/// `E[z_to | z_from] = mean_offset + gain * z_from`.
pub fn gaussian_bridge(schedule: &NoiseSchedule, from: usize, to: usize, mu: f64, sigma: f64) -> (f64, f64, f64) {
    let a_to = schedule.alpha_bar(to);
    let a_from = schedule.alpha_bar(from);
    let s2 = sigma * sigma;
    let var_to = a_to * s2 + 1.0 - a_to;
    let var_from = a_from * s2 + 1.0 - a_from;
    let cov = (a_from / a_to).sqrt() * var_to;
    let gain = cov / var_from;
    let offset = a_to.sqrt() * mu - gain * a_from.sqrt() * mu;
    let var = (var_to - cov * cov / var_from).max(0.0);
    (offset, gain, var)
}

/// Closed-form reverse step for data distributed `N(mu, sigma^2)` per element.
#[derive(Debug, Clone)]
pub struct AnalyticGaussianDenoiser {
    pub mu: f64,
    pub sigma: f64,
    schedule: NoiseSchedule,
}

pub fn analytic_gaussian_denoiser(mu: f64, sigma: f64, schedule: &NoiseSchedule) -> Result<AnalyticGaussianDenoiser> {
    if !(sigma > 0.0) || !mu.is_finite() {
        return Err(S2skError::invalid(format!("gaussian denoiser needs sigma > 0, got {sigma}")));
    }
    Ok(AnalyticGaussianDenoiser {
        mu,
        sigma,
        schedule: schedule.clone(),
    })
}

impl AnalyticGaussianDenoiser {
    pub fn coefficients(&self, from: usize, to: usize) -> (f64, f64, f64) {
        gaussian_bridge(&self.schedule, from, to, self.mu, self.sigma)
    }
}

impl Denoiser for AnalyticGaussianDenoiser {
    fn step(
        &self,
        noisy: &Array3<f64>,
        from: usize,
        to: usize,
        _cond: &Conditioning<'_>,
        rng: &mut dyn RngCore,
    ) -> Result<Array3<f64>> {
        self.schedule.check_step(from)?;
        let (offset, gain, var) = self.coefficients(from, to);
        let sd = var.sqrt();
        Ok(noisy.mapv(|z| {
            let mean = offset + gain * z;
            if sd > 0.0 {
                mean + sd * rng.sample::<f64, _>(StandardNormal)
            } else {
                mean
            }
        }))
    }
}

/// Noise-prediction model `eps(z_n, n, cond)`.
pub trait NoisePredictor: Send + Sync {
    fn predict_noise(&self, noisy: &Array3<f64>, n: usize, cond: &Conditioning<'_>) -> Result<Array3<f64>>;
}

/// Turns a noise predictor into a previous-state predictor through the DDPM posterior.
pub struct EpsilonAdapter<P> {
    pub predictor: P,
    pub schedule: NoiseSchedule,
}

impl<P: NoisePredictor> Denoiser for EpsilonAdapter<P> {
    fn step(
        &self,
        noisy: &Array3<f64>,
        from: usize,
        to: usize,
        cond: &Conditioning<'_>,
        rng: &mut dyn RngCore,
    ) -> Result<Array3<f64>> {
        self.schedule.check_step(from)?;
        let eps = self.predictor.predict_noise(noisy, from, cond)?;
        let a = self.schedule.alpha_bar(from);
        let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
        let x0 = Zip::from(noisy).and(&eps).map_collect(|&z, &e| (z - sb * e) / sa);
        Ok(posterior_step(&self.schedule, from, to, &x0, noisy, rng))
    }
}

/// Schedule description written next to serialized samples.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScheduleRecord {
    pub steps: usize,
    #[serde(flatten)]
    pub kind: ScheduleKind,
}

impl From<&NoiseSchedule> for ScheduleRecord {
    fn from(s: &NoiseSchedule) -> Self {
        ScheduleRecord {
            steps: s.steps,
            kind: s.kind,
        }
    }
}

impl TryFrom<ScheduleRecord> for NoiseSchedule {
    type Error = S2skError;
    fn try_from(r: ScheduleRecord) -> Result<Self> {
        NoiseSchedule::new(r.steps, r.kind)
    }
}
