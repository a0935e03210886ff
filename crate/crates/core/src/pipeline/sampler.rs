//! Deterministic DDIM sampling with classifier-free guidance.

use serde::{Deserialize, Serialize};

use crate::backend::schedule::gaussian_image;
use crate::backend::{Backend, ParameterSnapshot};
use crate::error::{Error, Result};
use crate::types::{ImageTensor, TextEmbedding};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerSettings {
    /// Seed of the initial noise; shared by every image of a sweep.
    pub seed: u64,
    pub steps: usize,
    pub guidance_scale: f64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        SamplerSettings { seed: 2024, steps: 10, guidance_scale: 7.5 }
    }
}

impl SamplerSettings {
    pub fn validate(&self, diffusion_steps: usize) -> Result<()> {
        if self.steps == 0 || self.steps > diffusion_steps {
            return Err(Error::contract(format!(
                "sampler steps must be in 1..={diffusion_steps}, got {}",
                self.steps
            )));
        }
        if !self.guidance_scale.is_finite() {
            return Err(Error::contract("guidance_scale must be finite"));
        }
        Ok(())
    }
}

/// Timesteps visited by the sampler, from noisiest to cleanest.
pub fn sampling_timesteps(diffusion_steps: usize, steps: usize) -> Vec<usize> {
    let ratio = diffusion_steps / steps;
    (0..steps).rev().map(|i| i * ratio).collect()
}

/// Generates an image conditioned on `embedding`.
///
/// The unconditional branch uses the empty-prompt embedding. With
/// `guidance_scale == 1` it is skipped, since the guided estimate reduces
/// to the conditional one.
pub fn sample(
    backend: &dyn Backend,
    params: &ParameterSnapshot,
    embedding: &TextEmbedding,
    settings: &SamplerSettings,
) -> Result<ImageTensor> {
    let spec = backend.spec();
    settings.validate(spec.diffusion_steps)?;
    spec.check_embedding(embedding)?;
    let schedule = backend.schedule();
    let unconditional = backend.unconditional_embedding();
    let (h, w) = (spec.image_height, spec.image_width);
    let g = settings.guidance_scale;

    let mut x: Vec<f64> = gaussian_image(settings.seed, h, w).data().iter().map(|&v| v as f64).collect();
    let timesteps = sampling_timesteps(spec.diffusion_steps, settings.steps);
    let ratio = spec.diffusion_steps / settings.steps;

    for &t in &timesteps {
        let noisy = ImageTensor::new(h, w, x.iter().map(|&v| v as f32).collect())
            .map_err(|_| Error::Sampling(format!("non-finite latent at timestep {t}")))?;
        let cond = backend.predict_noise(params, &noisy, t, embedding)?;
        let eps: Vec<f64> = if g == 1.0 {
            cond.data().iter().map(|&v| v as f64).collect()
        } else {
            let uncond = backend.predict_noise(params, &noisy, t, &unconditional)?;
            uncond
                .data()
                .iter()
                .zip(cond.data())
                .map(|(&u, &c)| u as f64 + g * (c as f64 - u as f64))
                .collect()
        };

        let a = schedule.alpha_bar(t);
        let a_prev = if t >= ratio { schedule.alpha_bar(t - ratio) } else { 1.0 };
        for (xi, e) in x.iter_mut().zip(&eps) {
            let x0 = ((*xi - (1.0 - a).sqrt() * e) / a.sqrt()).clamp(-1.0, 1.0);
            *xi = a_prev.sqrt() * x0 + (1.0 - a_prev).sqrt() * e;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Sampling(format!("non-finite value after timestep {t}")));
        }
    }

    ImageTensor::new(h, w, x.iter().map(|&v| v.clamp(-1.0, 1.0) as f32).collect())
        .map_err(|e| Error::Sampling(e.to_string()))
}
