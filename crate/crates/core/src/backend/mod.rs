//! The diffusion-model abstraction and its implementations.
//!
//! Every computation downstream of captioning goes through [`Backend`]:
//! text encoding, noise prediction, and the denoising loss with its
//! gradients. [`ToyBackend`] is a small UNet-shaped denoiser that runs
//! deterministically on the CPU.

mod checkpoint;
pub mod schedule;
pub(crate) mod tape;
mod text;
mod toy;

#[cfg(feature = "remote")]
pub mod remote;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint_file, save_checkpoint_file, TensorEntry};
pub use schedule::NoiseSchedule;
pub use text::HashingTextEncoder;
pub use toy::ToyBackend;

use crate::error::{Error, Result};
use crate::types::{ImageTensor, Prompt, TextEmbedding};

/// UNet region a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    Encoder,
    Middle,
    Decoder,
}

/// Whether a parameter lives in a self- or cross-attention sublayer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerKind {
    Attention,
    Other,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParameterRole {
    pub region: Region,
    pub kind: LayerKind,
}

impl ParameterRole {
    pub const fn new(region: Region, kind: LayerKind) -> Self {
        ParameterRole { region, kind }
    }

    /// The six role cells in a fixed order.
    pub const ALL: [ParameterRole; 6] = [
        ParameterRole::new(Region::Encoder, LayerKind::Attention),
        ParameterRole::new(Region::Encoder, LayerKind::Other),
        ParameterRole::new(Region::Middle, LayerKind::Attention),
        ParameterRole::new(Region::Middle, LayerKind::Other),
        ParameterRole::new(Region::Decoder, LayerKind::Attention),
        ParameterRole::new(Region::Decoder, LayerKind::Other),
    ];

    /// Classifies a parameter from its name alone.
    ///
    /// Names follow `encoder.<i>.<sub>`, `middle.<sub>` or
    /// `decoder.<i>.<sub>`; a parameter is attention iff one of its
    /// dot-separated segments is `selfattn` or `crossattn`.
    pub fn classify(name: &str) -> Result<Self> {
        let mut segments = name.split('.');
        let region = match segments.next() {
            Some("encoder") => Region::Encoder,
            Some("middle") => Region::Middle,
            Some("decoder") => Region::Decoder,
            _ => {
                return Err(Error::Config(format!(
                    "parameter {name:?} does not start with encoder., middle. or decoder."
                )))
            }
        };
        let rest: Vec<&str> = segments.collect();
        let indexed = region != Region::Middle;
        let min_segments = if indexed { 2 } else { 1 };
        if rest.len() < min_segments
            || (indexed && rest[0].parse::<usize>().is_err())
            || rest.iter().any(|s| s.is_empty())
        {
            return Err(Error::Config(format!("parameter {name:?} does not follow the naming convention")));
        }
        let kind = if rest.iter().any(|s| *s == "selfattn" || *s == "crossattn") {
            LayerKind::Attention
        } else {
            LayerKind::Other
        };
        Ok(ParameterRole { region, kind })
    }

    /// Key used in custom forgetting rule files, e.g. `encoder_attn`.
    pub fn cell_key(self) -> &'static str {
        match (self.region, self.kind) {
            (Region::Encoder, LayerKind::Attention) => "encoder_attn",
            (Region::Encoder, LayerKind::Other) => "encoder_other",
            (Region::Middle, LayerKind::Attention) => "middle_attn",
            (Region::Middle, LayerKind::Other) => "middle_other",
            (Region::Decoder, LayerKind::Attention) => "decoder_attn",
            (Region::Decoder, LayerKind::Other) => "decoder_other",
        }
    }

    pub fn from_cell_key(key: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.cell_key() == key)
    }
}

impl fmt::Display for ParameterRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cell_key())
    }
}

/// A dense `f32` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::contract(format!(
                "tensor of shape {shape:?} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Named parameter tensors with their role tags.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSnapshot {
    entries: BTreeMap<String, Tensor>,
    roles: BTreeMap<String, ParameterRole>,
}

impl ParameterSnapshot {
    pub fn new(
        entries: BTreeMap<String, Tensor>,
        roles: BTreeMap<String, ParameterRole>,
    ) -> Result<Self> {
        if entries.len() != roles.len() || entries.keys().any(|k| !roles.contains_key(k)) {
            return Err(Error::contract("role map must cover exactly the parameter names"));
        }
        Ok(ParameterSnapshot { entries, roles })
    }

    /// Builds a snapshot whose roles come from [`ParameterRole::classify`].
    pub fn from_named(entries: BTreeMap<String, Tensor>) -> Result<Self> {
        let roles = entries
            .keys()
            .map(|name| Ok((name.clone(), ParameterRole::classify(name)?)))
            .collect::<Result<_>>()?;
        Self::new(entries, roles)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, ParameterRole)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t, self.roles[n]))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn role(&self, name: &str) -> Option<ParameterRole> {
        self.roles.get(name).copied()
    }

    pub fn roles(&self) -> &BTreeMap<String, ParameterRole> {
        &self.roles
    }

    pub(crate) fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Same names, shapes and role tags.
    pub fn check_compatible(&self, other: &ParameterSnapshot) -> Result<()> {
        if self.roles != other.roles {
            return Err(Error::contract("snapshots have different parameter names or roles"));
        }
        for (name, t) in &self.entries {
            if other.entries[name].shape != t.shape {
                return Err(Error::contract(format!("parameter {name} has mismatched shapes")));
            }
        }
        Ok(())
    }

    /// Bitwise equality of every tensor.
    pub fn bits_eq(&self, other: &ParameterSnapshot) -> bool {
        self.roles == other.roles
            && self.entries.iter().all(|(n, t)| other.entries.get(n).is_some_and(|o| t.bits_eq(o)))
    }
}

/// Static description of a backend.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendSpec {
    pub name: String,
    pub image_height: usize,
    pub image_width: usize,
    pub embedding_tokens: usize,
    pub embedding_dims: usize,
    pub vocab_size: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub naming_convention: String,
}

impl BackendSpec {
    pub fn toy() -> Self {
        BackendSpec {
            name: "toy".into(),
            image_height: 16,
            image_width: 16,
            embedding_tokens: 8,
            embedding_dims: 16,
            vocab_size: 256,
            diffusion_steps: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
            naming_convention: "encoder.<i>.<sub> | middle.<sub> | decoder.<i>.<sub>".into(),
        }
    }

    pub fn check_image(&self, image: &ImageTensor) -> Result<()> {
        if image.height() != self.image_height || image.width() != self.image_width {
            return Err(Error::contract(format!(
                "backend {} expects {}x{} images, got {}x{}",
                self.name,
                self.image_height,
                self.image_width,
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    pub fn check_embedding(&self, embedding: &TextEmbedding) -> Result<()> {
        if embedding.shape() != (self.embedding_tokens, self.embedding_dims) {
            return Err(Error::contract(format!(
                "backend {} expects {}x{} embeddings, got {:?}",
                self.name,
                self.embedding_tokens,
                self.embedding_dims,
                embedding.shape()
            )));
        }
        Ok(())
    }

    pub fn check_timestep(&self, timestep: usize) -> Result<()> {
        if timestep >= self.diffusion_steps {
            return Err(Error::contract(format!(
                "timestep {timestep} outside 0..{}",
                self.diffusion_steps
            )));
        }
        Ok(())
    }
}

/// Denoising loss and its gradients, in `f64`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossAndGradients {
    pub loss: f64,
    /// Per-parameter gradients, flattened like the parameter tensors.
    pub params: BTreeMap<String, Vec<f64>>,
    /// Gradient with respect to the conditioning embedding, row-major.
    pub embedding: Vec<f64>,
}

impl LossAndGradients {
    pub fn squared_norm(&self) -> f64 {
        self.params
            .values()
            .flatten()
            .chain(&self.embedding)
            .map(|g| g * g)
            .sum()
    }
}

pub trait Backend: Send + Sync {
    fn spec(&self) -> &BackendSpec;

    fn schedule(&self) -> &NoiseSchedule;

    /// The pretrained parameters every session starts from.
    fn pretrained(&self) -> &ParameterSnapshot;

    /// Role of every named parameter.
    fn parameter_roles(&self) -> Result<BTreeMap<String, ParameterRole>> {
        self.pretrained()
            .names()
            .map(|n| Ok((n.to_owned(), ParameterRole::classify(n)?)))
            .collect()
    }

    /// Frozen text encoder.
    fn encode_text(&self, prompt: &Prompt) -> Result<TextEmbedding>;

    /// Embedding of the empty prompt, used for unconditional guidance.
    fn unconditional_embedding(&self) -> TextEmbedding;

    fn predict_noise(
        &self,
        params: &ParameterSnapshot,
        noisy_image: &ImageTensor,
        timestep: usize,
        embedding: &TextEmbedding,
    ) -> Result<ImageTensor>;

    /// Mean squared error between predicted and true noise for one
    /// `(noise, timestep)` draw, with gradients for the parameters and the
    /// embedding.
    fn loss_and_gradients(
        &self,
        params: &ParameterSnapshot,
        embedding: &TextEmbedding,
        image: &ImageTensor,
        noise_seed: u64,
        timestep: usize,
    ) -> Result<LossAndGradients>;

    /// Same loss without gradients.
    fn loss(
        &self,
        params: &ParameterSnapshot,
        embedding: &TextEmbedding,
        image: &ImageTensor,
        noise_seed: u64,
        timestep: usize,
    ) -> Result<f64> {
        Ok(self.loss_and_gradients(params, embedding, image, noise_seed, timestep)?.loss)
    }
}
