//! Noise schedule, forward process and the ancestral reverse update.
//!
//! Time steps run over `1..=T`; `t = 0` denotes clean data. Arrays are stored
//! zero-based, so step `t` lives at index `t - 1`.
//!
//! * one forward transition: `x_t = sqrt(1 - β_t) x_{t-1} + sqrt(β_t) z`
//! * closed-form marginal: `x_t = sqrt(ᾱ_t) x_0 + sqrt(1 - ᾱ_t) ε`
//! * reverse update: `x_{t-1} = (x_t - (1 - α_t) / sqrt(1 - ᾱ_t) ε̂) / sqrt(α_t) + σ_t z`

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// What the denoiser outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PredictionTarget {
    /// The noise `ε` that was mixed into `x_t`.
    #[default]
    Epsilon,
    /// The clean signal `x_0`.
    X0,
}

/// Choice of the reverse-step noise scale `σ_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// `σ_t² = β_t`.
    #[default]
    Beta,
    /// `σ_t² = β_t (1 - ᾱ_{t-1}) / (1 - ᾱ_t)`.
    Posterior,
}

/// Serializable description of a schedule, as stored in run configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(default)]
    pub sigma_mode: SigmaMode,
    #[serde(default)]
    pub prediction_target: PredictionTarget,
}

impl ScheduleConfig {
    /// The usual `1e-4 .. 0.02` range over 1000 steps, rescaled by `1000 / T`
    /// so shorter chains destroy a comparable amount of signal. `β_T` is
    /// capped at 0.999.
    pub fn desk(steps: usize, prediction_target: PredictionTarget) -> Self {
        let scale = 1000.0 / steps.max(1) as f64;
        let beta_end = (0.02 * scale).min(0.999);
        let beta_start = (1e-4 * scale).min(beta_end);
        ScheduleConfig {
            steps,
            beta_start,
            beta_end,
            sigma_mode: SigmaMode::Beta,
            prediction_target,
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)?
            .with_sigma_mode(self.sigma_mode)
            .with_prediction_target(self.prediction_target))
    }
}

/// β/α/ᾱ/σ tables for a `T`-step chain.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
    sigma_mode: SigmaMode,
    prediction_target: PredictionTarget,
}

impl NoiseSchedule {
    /// `T` betas spaced linearly from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("linear_schedule", "T must be at least 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(
                "linear_schedule",
                format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"),
            ));
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            let span = (steps - 1) as f64;
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
                .collect()
        };
        Self::from_betas(betas)
    }

    /// Arbitrary betas in `[0, 1)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("schedule", "no steps"));
        }
        if let Some(b) = betas.iter().find(|b| !(0.0..1.0).contains(*b)) {
            return Err(Error::invalid("schedule", format!("beta {b} outside [0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let mut s = NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
            sigmas: Vec::new(),
            sigma_mode: SigmaMode::Beta,
            prediction_target: PredictionTarget::Epsilon,
        };
        s.sigmas = s.compute_sigmas();
        Ok(s)
    }

    pub fn with_sigma_mode(mut self, mode: SigmaMode) -> Self {
        self.sigma_mode = mode;
        self.sigmas = self.compute_sigmas();
        self
    }

    pub fn with_prediction_target(mut self, target: PredictionTarget) -> Self {
        self.prediction_target = target;
        self
    }

    fn compute_sigmas(&self) -> Vec<f64> {
        (0..self.betas.len())
            .map(|i| match self.sigma_mode {
                SigmaMode::Beta => self.betas[i].sqrt(),
                SigmaMode::Posterior => {
                    let prev = if i == 0 { 1.0 } else { self.alpha_bars[i - 1] };
                    let denom = 1.0 - self.alpha_bars[i];
                    if denom <= 0.0 {
                        0.0
                    } else {
                        (self.betas[i] * (1.0 - prev) / denom).sqrt()
                    }
                }
            })
            .collect()
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn prediction_target(&self) -> PredictionTarget {
        self.prediction_target
    }

    pub fn sigma_mode(&self) -> SigmaMode {
        self.sigma_mode
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// Zero-based table index of step `t`, or an error when `t ∉ [1, T]`.
    pub fn index_of(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(
                "schedule",
                format!("time step {t} outside [1, {}]", self.steps()),
            ));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.index_of(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.index_of(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.index_of(t)?])
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok(self.sigmas[self.index_of(t)?])
    }

    /// Closed-form marginal sample `sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) eps`.
    pub fn forward_diffuse(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        let ab = self.alpha_bar(t)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        x0.zip_map(eps, |x, e| a * x + b * e)
    }

    /// One forward transition `sqrt(1 - β_t) x_prev + sqrt(β_t) z`.
    pub fn q_transition_sample(&self, x_prev: &Tensor, t: usize, z: &Tensor) -> Result<Tensor> {
        let beta = self.beta(t)?;
        let (a, b) = ((1.0 - beta).sqrt(), beta.sqrt());
        x_prev.zip_map(z, |x, e| a * x + b * e)
    }

    /// Noise estimate implied by a clean-signal estimate at step `t`.
    pub fn eps_from_x0(&self, x_t: &Tensor, t: usize, x0_hat: &Tensor) -> Result<Tensor> {
        let ab = self.alpha_bar(t)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        x_t.zip_map(x0_hat, |x, x0| (x - a * x0) / b)
    }

    /// Clean-signal estimate implied by a noise estimate at step `t`.
    pub fn x0_from_eps(&self, x_t: &Tensor, t: usize, eps_hat: &Tensor) -> Result<Tensor> {
        let ab = self.alpha_bar(t)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        x_t.zip_map(eps_hat, |x, e| (x - b * e) / a)
    }

    /// Ancestral update from `x_t` to `x_{t-1}`.
    ///
    /// `prediction` is interpreted according to the schedule's
    /// [`PredictionTarget`]; an `x0` prediction is first converted to the
    /// implied noise. `z` must be all zero at `t = 1`.
    pub fn reverse_step(&self, x_t: &Tensor, t: usize, prediction: &Tensor, z: &Tensor) -> Result<Tensor> {
        let i = self.index_of(t)?;
        if t == 1 && z.data().iter().any(|&v| v != 0.0) {
            return Err(Error::invalid("reverse_step", "final step (t = 1) must not add noise"));
        }
        let converted;
        let eps_hat = match self.prediction_target {
            PredictionTarget::Epsilon => prediction,
            PredictionTarget::X0 => {
                converted = self.eps_from_x0(x_t, t, prediction)?;
                &converted
            }
        };
        let alpha = self.alphas[i];
        let coef = (1.0 - alpha) / (1.0 - self.alpha_bars[i]).sqrt();
        let inv_sqrt_alpha = 1.0 / alpha.sqrt();
        let sigma = self.sigmas[i];
        let mean = x_t.zip_map(eps_hat, |x, e| inv_sqrt_alpha * (x - coef * e))?;
        mean.zip_map(z, |m, z| m + sigma * z)
    }

    pub fn config(&self) -> ScheduleConfig {
        ScheduleConfig {
            steps: self.steps(),
            beta_start: self.betas[0],
            beta_end: *self.betas.last().unwrap(),
            sigma_mode: self.sigma_mode,
            prediction_target: self.prediction_target,
        }
    }
}

/// A point `(x_t, t)` on a reverse trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionState {
    pub x: Tensor,
    pub t: usize,
}

impl DiffusionState {
    /// Start of a chain at `t = T`.
    pub fn start(x_t: Tensor, schedule: &NoiseSchedule) -> Self {
        DiffusionState {
            x: x_t,
            t: schedule.steps(),
        }
    }

    pub fn is_done(&self) -> bool {
        self.t == 0
    }

    /// Applies one reverse update and decrements `t`.
    pub fn step(&mut self, schedule: &NoiseSchedule, prediction: &Tensor, z: &Tensor) -> Result<()> {
        if self.t == 0 {
            return Err(Error::invalid("reverse_step", "chain already reached t = 0"));
        }
        self.x = schedule.reverse_step(&self.x, self.t, prediction, z)?;
        self.t -= 1;
        Ok(())
    }
}
