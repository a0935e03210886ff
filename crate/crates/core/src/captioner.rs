//! Source-prompt generation for an input image.
//!
//! `remote` mode POSTs the PNG-encoded image to an external captioning
//! endpoint and expects `{"caption": "..."}` back. `stub` mode looks the
//! image digest up in a table and never touches the network.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ImageTensor, Prompt, PromptOrigin};

/// Caption returned by the stub when the image digest is not in its table.
pub const FALLBACK_CAPTION: &str = "an image";

/// Environment variable that overrides the remote endpoint.
pub const CAPTION_URL_ENV: &str = "FORGEDIT_CAPTION_URL";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionerMode {
    #[default]
    Stub,
    Remote,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionerConfig {
    pub mode: CaptionerMode,
    #[serde(default)]
    pub endpoint_url: Option<String>,
    /// Request timeout in seconds.
    pub timeout_secs: f64,
    /// Image digest (see [`ImageTensor::digest`]) to caption.
    #[serde(default)]
    pub stub_table: BTreeMap<String, String>,
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        CaptionerConfig {
            mode: CaptionerMode::Stub,
            endpoint_url: None,
            timeout_secs: 10.0,
            stub_table: BTreeMap::new(),
        }
    }
}

impl CaptionerConfig {
    pub fn stub(table: impl IntoIterator<Item = (String, String)>) -> Self {
        CaptionerConfig { stub_table: table.into_iter().collect(), ..Default::default() }
    }

    pub fn remote(endpoint_url: impl Into<String>, timeout_secs: f64) -> Self {
        CaptionerConfig {
            mode: CaptionerMode::Remote,
            endpoint_url: Some(endpoint_url.into()),
            timeout_secs,
            stub_table: BTreeMap::new(),
        }
    }

    /// Applies `FORGEDIT_CAPTION_URL`, switching to remote mode when set.
    pub fn with_env_override(mut self) -> Self {
        if let Ok(url) = std::env::var(CAPTION_URL_ENV) {
            if !url.trim().is_empty() {
                self.mode = CaptionerMode::Remote;
                self.endpoint_url = Some(url);
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(Error::Config("captioner timeout must be positive".into()));
        }
        if self.mode == CaptionerMode::Remote && self.endpoint_url.is_none() {
            return Err(Error::Config("remote captioner needs endpoint_url".into()));
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct CaptionResponse {
    caption: String,
}

pub fn generate_source_prompt(image: &ImageTensor, config: &CaptionerConfig) -> Result<Prompt> {
    config.validate()?;
    let caption = match config.mode {
        CaptionerMode::Stub => config
            .stub_table
            .get(&image.digest())
            .cloned()
            .unwrap_or_else(|| FALLBACK_CAPTION.to_owned()),
        CaptionerMode::Remote => {
            let url = config.endpoint_url.as_deref().expect("validated");
            request_caption(url, image, Duration::from_secs_f64(config.timeout_secs))?
        }
    };
    Prompt::new(caption, PromptOrigin::Captioner)
        .map_err(|_| Error::CaptionerUnavailable("captioner returned an empty caption".into()))
}

fn request_caption(url: &str, image: &ImageTensor, timeout: Duration) -> Result<String> {
    let unavailable = |e: reqwest::Error| Error::CaptionerUnavailable(e.to_string());
    let client = reqwest::blocking::Client::builder()
        .timeout(timeout)
        .connect_timeout(timeout)
        .build()
        .map_err(unavailable)?;
    let response = client
        .post(url)
        .header(reqwest::header::CONTENT_TYPE, "image/png")
        .body(image.to_png()?)
        .send()
        .map_err(unavailable)?
        .error_for_status()
        .map_err(unavailable)?;
    let body: CaptionResponse = response.json().map_err(unavailable)?;
    Ok(body.caption)
}
