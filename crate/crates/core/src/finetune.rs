//! One-shot joint optimization of the source embedding and the UNet.
//!
//! Starting from the encoded source prompt and the pretrained snapshot, each
//! step draws a timestep and a noise sample, evaluates the denoising loss,
//! and moves *both* the embedding and every UNet parameter along the clipped
//! gradient. The same [`FinetuneConfig`] is used for every image.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, ParameterSnapshot};
use crate::error::{Error, Result};
use crate::types::{ImageTensor, Prompt, TextEmbedding};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepSampling {
    #[default]
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub embedding_lr: f64,
    pub unet_lr: f64,
    #[serde(default)]
    pub timestep_sampling: TimestepSampling,
    pub seed: u64,
    /// Global gradient-norm clip over parameters and embedding together.
    pub clip_norm: f64,
    /// Soft wall-clock budget in seconds; exceeding it ends the run after
    /// the current step.
    #[serde(default)]
    pub wall_clock_budget: Option<f64>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 200,
            embedding_lr: 1e-2,
            unet_lr: 0.2,
            timestep_sampling: TimestepSampling::Uniform,
            seed: 7,
            clip_norm: 1.0,
            wall_clock_budget: None,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::contract("finetune steps must be positive"));
        }
        if !(self.embedding_lr > 0.0 && self.unet_lr > 0.0) {
            return Err(Error::contract("learning rates must be positive"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::contract("clip_norm must be positive"));
        }
        if let Some(b) = self.wall_clock_budget {
            if !(b > 0.0) {
                return Err(Error::contract("wall_clock_budget must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneResult {
    pub optimized_embedding: TextEmbedding,
    pub finetuned_params: ParameterSnapshot,
    /// One point per completed step; shorter than `steps` only when the
    /// wall-clock budget ran out.
    pub loss_curve: Vec<LossPoint>,
    pub elapsed_secs: f64,
    pub budget_exceeded: bool,
}

impl FinetuneResult {
    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> f64 {
        let slice = &self.loss_curve[range];
        slice.iter().map(|p| p.loss).sum::<f64>() / slice.len() as f64
    }
}

/// Runs the finetune, reporting each completed step to `on_step`.
///
/// The pretrained snapshot is only read; a new snapshot is returned.
pub fn finetune(
    backend: &dyn Backend,
    image: &ImageTensor,
    source_prompt: &Prompt,
    config: &FinetuneConfig,
    mut on_step: impl FnMut(&LossPoint),
) -> Result<FinetuneResult> {
    config.validate()?;
    backend.spec().check_image(image)?;
    let started = Instant::now();

    let mut embedding: Vec<f32> = backend.encode_text(source_prompt)?.data().to_vec();
    let (tokens, dims) = (backend.spec().embedding_tokens, backend.spec().embedding_dims);
    let mut params = backend.pretrained().clone();
    let timesteps = backend.spec().diffusion_steps;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut curve = Vec::with_capacity(config.steps);
    let mut budget_exceeded = false;

    for step in 0..config.steps {
        let timestep = match config.timestep_sampling {
            TimestepSampling::Uniform => rng.random_range(0..timesteps),
        };
        let noise_seed: u64 = rng.random();
        let current = TextEmbedding::new(tokens, dims, embedding.clone()).map_err(|e| {
            Error::FinetuneAborted { step, reason: e.to_string(), partial_curve: curve.clone() }
        })?;

        let out = backend
            .loss_and_gradients(&params, &current, image, noise_seed, timestep)
            .map_err(|e| match e {
                Error::Numerical(reason) => {
                    Error::FinetuneAborted { step, reason, partial_curve: curve.clone() }
                }
                other => other,
            })?;
        let norm = out.squared_norm().sqrt();
        if !norm.is_finite() {
            return Err(Error::FinetuneAborted {
                step,
                reason: "gradient norm is not finite".into(),
                partial_curve: curve,
            });
        }
        let scale = if norm > config.clip_norm { config.clip_norm / norm } else { 1.0 };

        for (name, grad) in &out.params {
            let tensor = params.tensor_mut(name).expect("gradient names match parameters");
            for (w, g) in tensor.data.iter_mut().zip(grad) {
                *w = (*w as f64 - config.unet_lr * scale * g) as f32;
            }
        }
        for (w, g) in embedding.iter_mut().zip(&out.embedding) {
            *w = (*w as f64 - config.embedding_lr * scale * g) as f32;
        }

        let point = LossPoint { step, loss: out.loss };
        curve.push(point);
        on_step(&point);

        if let Some(budget) = config.wall_clock_budget {
            if started.elapsed().as_secs_f64() > budget && step + 1 < config.steps {
                budget_exceeded = true;
                break;
            }
        }
    }

    let optimized_embedding = TextEmbedding::new(tokens, dims, embedding).map_err(|e| {
        Error::FinetuneAborted {
            step: curve.len(),
            reason: e.to_string(),
            partial_curve: curve.clone(),
        }
    })?;
    Ok(FinetuneResult {
        optimized_embedding,
        finetuned_params: params,
        loss_curve: curve,
        elapsed_secs: started.elapsed().as_secs_f64(),
        budget_exceeded,
    })
}

/// Number of `(noise, timestep)` pairs in a reconstruction probe.
pub const PROBE_SIZE: usize = 16;

/// Mean denoising error over a fixed probe set derived from `probe_seed`.
///
/// Low values mean the model reconstructs the image well under this
/// embedding; the probe timesteps are spread evenly over the schedule.
pub fn reconstruction_error(
    backend: &dyn Backend,
    params: &ParameterSnapshot,
    embedding: &TextEmbedding,
    image: &ImageTensor,
    probe_seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
    let steps = backend.spec().diffusion_steps;
    let mut total = 0.0;
    for i in 0..PROBE_SIZE {
        let timestep = (i * steps) / PROBE_SIZE;
        let noise_seed: u64 = rng.random();
        total += backend.loss(params, embedding, image, noise_seed, timestep)?;
    }
    Ok(total / PROBE_SIZE as f64)
}
