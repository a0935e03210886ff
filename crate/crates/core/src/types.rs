//! Domain values shared by every stage of an edit: images, text embeddings,
//! prompts and operator verdicts.

use std::fmt;
use std::io::Cursor;

use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Images are always RGB.
pub const CHANNELS: usize = 3;

/// An RGB image in model space, stored row-major as `height × width × 3`.
///
/// Pixel values are nominally in `[-1, 1]`. Intermediate diffusion states
/// (noised images, predicted noise) reuse this type and may leave that range;
/// conversion to 8-bit clamps.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height < 8 || width < 8 || !height.is_multiple_of(4) || !width.is_multiple_of(4) {
            return Err(Error::contract(format!(
                "image must be at least 8x8 with sides divisible by 4, got {height}x{width}"
            )));
        }
        if data.len() != height * width * CHANNELS {
            return Err(Error::contract(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                height * width * CHANNELS
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!("non-finite pixel value at index {i}")));
        }
        Ok(ImageTensor { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0.0; height * width * CHANNELS])
    }

    /// Builds an image by evaluating `f(y, x, channel)` at every position.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                for c in 0..CHANNELS {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Model space from 8-bit: `v / 127.5 - 1`.
    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| b as f32 / 127.5 - 1.0).collect();
        Self::new(height, width, data)
    }

    /// 8-bit from model space: `round((v + 1) * 127.5)`, clamped to `0..=255`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let decoded = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8();
        let (w, h) = decoded.dimensions();
        Self::from_rgb8(h as usize, w as usize, decoded.as_raw())
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let buf = RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .expect("buffer length is checked at construction");
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    /// SHA-256 over the dimensions and the quantized 8-bit pixels.
    ///
    /// Independent of PNG encoder settings, so a caption table keyed by
    /// digest survives re-encoding.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.height as u32).to_le_bytes());
        hasher.update((self.width as u32).to_le_bytes());
        hasher.update(self.to_rgb8());
        hex::encode(hasher.finalize())
    }
}

/// A token-by-dimension text embedding matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    tokens: usize,
    dims: usize,
    data: Vec<f32>,
}

const EMBEDDING_MAGIC: &[u8; 4] = b"FEMB";

impl TextEmbedding {
    pub fn new(tokens: usize, dims: usize, data: Vec<f32>) -> Result<Self> {
        if tokens == 0 || dims == 0 {
            return Err(Error::contract("embedding must have at least one token and one dimension"));
        }
        if data.len() != tokens * dims {
            return Err(Error::contract(format!(
                "embedding buffer has {} values, expected {tokens}x{dims}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("embedding contains non-finite values"));
        }
        Ok(TextEmbedding { tokens, dims, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dims = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dims) {
            return Err(Error::contract("ragged embedding rows"));
        }
        Self::new(rows.len(), dims, rows.concat())
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.tokens, self.dims)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dims..(i + 1) * self.dims]
    }

    pub(crate) fn check_same_shape(&self, other: &TextEmbedding) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::contract(format!(
                "embedding shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// `FEMB`, tokens and dims as little-endian u32, then little-endian f32 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.data.len() * 4);
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&(self.tokens as u32).to_le_bytes());
        out.extend_from_slice(&(self.dims as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != EMBEDDING_MAGIC {
            return Err(Error::contract("not an embedding payload"));
        }
        let tokens = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let dims = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() != tokens * dims * 4 {
            return Err(Error::contract("embedding payload length mismatch"));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(tokens, dims, data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptOrigin {
    Captioner,
    User,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    text: String,
    origin: PromptOrigin,
}

impl Prompt {
    pub fn new(text: impl Into<String>, origin: PromptOrigin) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::contract("prompt is empty"));
        }
        Ok(Prompt { text, origin })
    }

    pub fn user(text: impl Into<String>) -> Result<Self> {
        Self::new(text, PromptOrigin::User)
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn origin(&self) -> PromptOrigin {
        self.origin
    }
}

impl fmt::Display for Prompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// What the target prompt is trying to change.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EditIntention {
    /// Space and structure: pose, layout, shape.
    Structure,
    /// Appearance and texture: colour, material, style.
    Appearance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VerdictKind {
    Success,
    Overfit,
    Underfit,
}

/// The operator's judgement on the most recent sweep.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub kind: VerdictKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen_image: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intention: Option<EditIntention>,
}

impl Verdict {
    pub fn success(chosen_image: usize) -> Self {
        Verdict { kind: VerdictKind::Success, chosen_image: Some(chosen_image), intention: None }
    }

    pub fn overfit(intention: EditIntention) -> Self {
        Verdict { kind: VerdictKind::Overfit, chosen_image: None, intention: Some(intention) }
    }

    pub fn underfit() -> Self {
        Verdict { kind: VerdictKind::Underfit, chosen_image: None, intention: None }
    }

    /// Checks the field requirements that do not depend on session contents.
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            VerdictKind::Success if self.chosen_image.is_none() => {
                Err(Error::contract("a Success verdict must name the chosen image"))
            }
            VerdictKind::Overfit if self.intention.is_none() => {
                Err(Error::contract("an Overfit verdict must state the edit intention"))
            }
            VerdictKind::Success | VerdictKind::Underfit if self.intention.is_some() => {
                Err(Error::contract("edit intention is only meaningful for Overfit verdicts"))
            }
            VerdictKind::Overfit | VerdictKind::Underfit if self.chosen_image.is_some() => {
                Err(Error::contract("only a Success verdict may choose an image"))
            }
            _ => Ok(()),
        }
    }
}
