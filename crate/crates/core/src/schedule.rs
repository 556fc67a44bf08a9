//! Noise schedule and deterministic DDIM stepping.
//!
//! `alpha_bar[i]` is the cumulative signal coefficient at training index `i`
//! with `alpha_bar[0] = 1`. Inference index `t ∈ 0..=T` maps to training
//! index `timestep_map[t]`. All stepping arithmetic is `f64`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::LatentTensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub num_train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub num_inference_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            num_train_steps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
            num_inference_steps: 50,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(
            self.num_train_steps,
            self.beta_start,
            self.beta_end,
            self.num_inference_steps,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
    timestep_map: Vec<usize>,
}

impl NoiseSchedule {
    /// Scaled-linear betas with a leading-spaced inference map
    /// `τ[t] = round(t · N / T)`.
    pub fn new(num_train_steps: usize, beta_start: f64, beta_end: f64, steps: usize) -> Result<Self> {
        if steps == 0 || steps > num_train_steps {
            return Err(Error::Config(format!(
                "inference steps must be in 1..={num_train_steps}, got {steps}"
            )));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let n = num_train_steps;
        let (s0, s1) = (beta_start.sqrt(), beta_end.sqrt());
        let mut alpha_bar = Vec::with_capacity(n + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for i in 1..=n {
            let beta = if beta_start == beta_end {
                beta_start
            } else {
                let frac = if n == 1 { 0.0 } else { (i - 1) as f64 / (n - 1) as f64 };
                let r = s0 + frac * (s1 - s0);
                r * r
            };
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        let timestep_map = (0..=steps)
            .map(|t| ((t * n) as f64 / steps as f64).round() as usize)
            .collect();
        Self::from_parts(alpha_bar, timestep_map)
    }

    /// Builds a schedule from an explicit table, checking every invariant.
    pub fn from_parts(alpha_bar: Vec<f64>, timestep_map: Vec<usize>) -> Result<Self> {
        if alpha_bar.len() < 2 || alpha_bar[0] != 1.0 {
            return Err(Error::Config("alpha_bar must start at 1 and have at least two entries".into()));
        }
        if alpha_bar.iter().any(|a| !a.is_finite() || *a <= 0.0) {
            return Err(Error::Config("alpha_bar entries must be finite and positive".into()));
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("alpha_bar must be strictly decreasing".into()));
        }
        if timestep_map.len() < 2 || timestep_map[0] != 0 {
            return Err(Error::Config("timestep map must start at 0 and cover at least one step".into()));
        }
        if timestep_map.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("timestep map must be strictly increasing".into()));
        }
        if *timestep_map.last().unwrap() >= alpha_bar.len() {
            return Err(Error::Config("timestep map exceeds the training range".into()));
        }
        Ok(Self {
            alpha_bar,
            timestep_map,
        })
    }

    pub fn num_train_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    /// Number of inference steps `T`.
    pub fn steps(&self) -> usize {
        self.timestep_map.len() - 1
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn timestep_map(&self) -> &[usize] {
        &self.timestep_map
    }

    /// Training index for inference index `t`.
    pub fn timestep(&self, t: usize) -> Result<usize> {
        self.timestep_map
            .get(t)
            .copied()
            .ok_or_else(|| Error::Usage(format!("step {t} outside 0..={}", self.steps())))
    }

    /// `alpha_bar[τ[t]]`.
    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.timestep(t)?])
    }

    fn pair(&self, t: usize) -> Result<(f64, f64)> {
        if t == 0 || t > self.steps() {
            return Err(Error::Usage(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok((self.alpha_bar_at(t)?, self.alpha_bar_at(t - 1)?))
    }

    /// One denoising step `z_t -> z_{t-1}`.
    pub fn sample_step(&self, z_t: &LatentTensor, eps_t: &LatentTensor, t: usize) -> Result<LatentTensor> {
        let (a_t, a_prev) = self.pair(t)?;
        ddim_sample(z_t, eps_t, a_t, a_prev).map_err(|e| e.at_step(t))
    }

    /// One inversion step `z_{t-1} -> z_t`.
    pub fn invert_step(&self, z_prev: &LatentTensor, eps_prev: &LatentTensor, t: usize) -> Result<LatentTensor> {
        let (a_t, a_prev) = self.pair(t)?;
        ddim_invert(z_prev, eps_prev, a_t, a_prev).map_err(|e| e.at_step(t))
    }

    /// Coefficient `C_t` in `z_{t-1} - z*_{t-1} = C_t (ε_t - ε*_{t-1})` when `z_t = z*_t`.
    pub fn step_error_constant(&self, t: usize) -> Result<f64> {
        let (a_t, a_prev) = self.pair(t)?;
        Ok(step_error_constant(a_t, a_prev))
    }

    /// Hex SHA-256 over the table and map; identifies a schedule in manifests.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for a in &self.alpha_bar {
            h.update(a.to_le_bytes());
        }
        for t in &self.timestep_map {
            h.update((*t as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn check_inputs(z: &LatentTensor, eps: &LatentTensor) -> Result<()> {
    z.check_same(eps)?;
    if !z.is_finite() || !eps.is_finite() {
        return Err(Error::numeric("non-finite latent or noise input"));
    }
    Ok(())
}

/// `z_{t-1} = √ᾱ_{t-1} · (z_t / √ᾱ_t + (√(1/ᾱ_{t-1} - 1) - √(1/ᾱ_t - 1)) · ε_t)`
pub fn ddim_sample(z_t: &LatentTensor, eps_t: &LatentTensor, alpha_t: f64, alpha_prev: f64) -> Result<LatentTensor> {
    check_inputs(z_t, eps_t)?;
    let (sp, st) = (alpha_prev.sqrt(), alpha_t.sqrt());
    let c = (1.0 / alpha_prev - 1.0).sqrt() - (1.0 / alpha_t - 1.0).sqrt();
    Ok(z_t.zip(eps_t, |z, e| sp * (z / st + c * e)))
}

/// `z_t = √ᾱ_t · (z_{t-1} / √ᾱ_{t-1} + (√(1/ᾱ_t - 1) - √(1/ᾱ_{t-1} - 1)) · ε_{t-1})`
pub fn ddim_invert(z_prev: &LatentTensor, eps_prev: &LatentTensor, alpha_t: f64, alpha_prev: f64) -> Result<LatentTensor> {
    check_inputs(z_prev, eps_prev)?;
    let (sp, st) = (alpha_prev.sqrt(), alpha_t.sqrt());
    let c = (1.0 / alpha_t - 1.0).sqrt() - (1.0 / alpha_prev - 1.0).sqrt();
    Ok(z_prev.zip(eps_prev, |z, e| st * (z / sp + c * e)))
}

pub fn step_error_constant(alpha_t: f64, alpha_prev: f64) -> f64 {
    alpha_prev.sqrt() * ((1.0 / alpha_prev - 1.0).sqrt() - (1.0 / alpha_t - 1.0).sqrt())
}
