use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::types::{ImageTensor, CHANNELS};

/// Forward-noising schedule with linearly spaced betas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Self {
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        let mut alphas_cumprod = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alphas_cumprod.push(acc);
        }
        NoiseSchedule { betas, alphas_cumprod }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_cumprod[t]
    }

    /// `sqrt(ᾱ_t)·x0 + sqrt(1 − ᾱ_t)·ε`
    pub fn add_noise(&self, x0: &ImageTensor, noise: &ImageTensor, t: usize) -> Result<ImageTensor> {
        let a = self.alpha_bar(t);
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        let data = x0
            .data()
            .iter()
            .zip(noise.data())
            .map(|(&x, &e)| (sa * x as f64 + sn * e as f64) as f32)
            .collect();
        ImageTensor::new(x0.height(), x0.width(), data)
    }
}

/// Standard normal image drawn from a ChaCha8 stream seeded by `seed`.
pub fn gaussian_image(seed: u64, height: usize, width: usize) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..height * width * CHANNELS)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v as f32
        })
        .collect();
    ImageTensor::new(height, width, data).expect("valid noise image")
}
