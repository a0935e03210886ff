//! Adapter to an external diffusion runtime over HTTP.
//!
//! The runtime owns the real model; this side only ships tensors. Wire
//! contract (JSON unless noted):
//!
//! - `GET  /spec` → [`BackendSpec`]
//! - `GET  /checkpoint` → pretrained weights in the checkpoint format
//! - `PUT  /checkpoints/{sha256}` ← checkpoint bytes (uploaded once per snapshot)
//! - `POST /encode` `{"text"}` → `{"tokens", "dims", "data"}`
//! - `POST /predict_noise` `{"checkpoint", "image", "timestep", "embedding"}` → `{"data"}`
//! - `POST /loss_and_gradients` `{"checkpoint", "image", "embedding", "noise_seed", "timestep"}`
//!   → `{"loss", "params", "embedding"}`
//!
//! Images travel as `{"height", "width", "data"}` with interleaved RGB
//! values in model space.

use std::collections::HashSet;
use std::sync::Mutex;
use std::time::Duration;

use reqwest::blocking::Client;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::{Backend, BackendSpec, LossAndGradients, NoiseSchedule, ParameterSnapshot};
use crate::error::{Error, Result};
use crate::types::{ImageTensor, Prompt, TextEmbedding};

#[derive(Serialize, Deserialize)]
struct WireImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct WireEmbedding {
    tokens: usize,
    dims: usize,
    data: Vec<f32>,
}

pub struct RemoteBackend {
    client: Client,
    base_url: String,
    spec: BackendSpec,
    schedule: NoiseSchedule,
    pretrained: ParameterSnapshot,
    unconditional: TextEmbedding,
    uploaded: Mutex<HashSet<String>>,
}

fn remote(e: impl std::fmt::Display) -> Error {
    Error::Remote(e.to_string())
}

impl RemoteBackend {
    /// Fetches the spec, pretrained weights and the empty-prompt embedding.
    pub fn connect(base_url: &str, timeout: Duration) -> Result<Self> {
        let client = Client::builder().timeout(timeout).build().map_err(remote)?;
        let base_url = base_url.trim_end_matches('/').to_owned();
        let spec: BackendSpec = client
            .get(format!("{base_url}/spec"))
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.json())
            .map_err(remote)?;
        let bytes = client
            .get(format!("{base_url}/checkpoint"))
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.bytes())
            .map_err(remote)?;
        let pretrained = ParameterSnapshot::from_checkpoint_bytes(&bytes)?;
        let schedule = NoiseSchedule::linear(spec.diffusion_steps, spec.beta_start, spec.beta_end);
        let mut backend = RemoteBackend {
            client,
            base_url,
            spec,
            schedule,
            pretrained,
            unconditional: TextEmbedding::new(1, 1, vec![0.0])?,
            uploaded: Mutex::new(HashSet::new()),
        };
        backend.unconditional = backend.encode_raw("")?;
        Ok(backend)
    }

    fn post<T: for<'de> Deserialize<'de>>(&self, path: &str, body: serde_json::Value) -> Result<T> {
        self.client
            .post(format!("{}/{path}", self.base_url))
            .json(&body)
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.json())
            .map_err(remote)
    }

    fn encode_raw(&self, text: &str) -> Result<TextEmbedding> {
        let e: WireEmbedding = self.post("encode", json!({ "text": text }))?;
        let embedding = TextEmbedding::new(e.tokens, e.dims, e.data)?;
        self.spec.check_embedding(&embedding)?;
        Ok(embedding)
    }

    /// Uploads `params` unless the runtime already has them; returns the id.
    fn ensure_uploaded(&self, params: &ParameterSnapshot) -> Result<String> {
        let bytes = params.to_checkpoint_bytes();
        let id = hex::encode(Sha256::digest(&bytes));
        if self.uploaded.lock().unwrap_or_else(|p| p.into_inner()).contains(&id) {
            return Ok(id);
        }
        self.client
            .put(format!("{}/checkpoints/{id}", self.base_url))
            .body(bytes)
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(remote)?;
        self.uploaded.lock().unwrap_or_else(|p| p.into_inner()).insert(id.clone());
        Ok(id)
    }

    fn wire_image(image: &ImageTensor) -> WireImage {
        WireImage { height: image.height(), width: image.width(), data: image.data().to_vec() }
    }
}

impl Backend for RemoteBackend {
    fn spec(&self) -> &BackendSpec {
        &self.spec
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn pretrained(&self) -> &ParameterSnapshot {
        &self.pretrained
    }

    fn encode_text(&self, prompt: &Prompt) -> Result<TextEmbedding> {
        self.encode_raw(prompt.text())
    }

    fn unconditional_embedding(&self) -> TextEmbedding {
        self.unconditional.clone()
    }

    fn predict_noise(
        &self,
        params: &ParameterSnapshot,
        noisy_image: &ImageTensor,
        timestep: usize,
        embedding: &TextEmbedding,
    ) -> Result<ImageTensor> {
        self.spec.check_image(noisy_image)?;
        self.spec.check_timestep(timestep)?;
        self.spec.check_embedding(embedding)?;
        let checkpoint = self.ensure_uploaded(params)?;
        let out: WireImage = self.post(
            "predict_noise",
            json!({
                "checkpoint": checkpoint,
                "image": Self::wire_image(noisy_image),
                "timestep": timestep,
                "embedding": embedding.data(),
            }),
        )?;
        ImageTensor::new(out.height, out.width, out.data)
    }

    fn loss_and_gradients(
        &self,
        params: &ParameterSnapshot,
        embedding: &TextEmbedding,
        image: &ImageTensor,
        noise_seed: u64,
        timestep: usize,
    ) -> Result<LossAndGradients> {
        self.spec.check_image(image)?;
        self.spec.check_timestep(timestep)?;
        self.spec.check_embedding(embedding)?;
        let checkpoint = self.ensure_uploaded(params)?;
        let out: LossAndGradients = self.post(
            "loss_and_gradients",
            json!({
                "checkpoint": checkpoint,
                "image": Self::wire_image(image),
                "embedding": embedding.data(),
                "noise_seed": noise_seed,
                "timestep": timestep,
            }),
        )?;
        if !out.loss.is_finite() {
            return Err(Error::Numerical(format!("remote loss is {}", out.loss)));
        }
        Ok(out)
    }
}
