//! Deployment configuration from the environment.

use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context};
use forgedit::backend::{Backend, ToyBackend};
use forgedit::captioner::CaptionerConfig;
use forgedit::finetune::FinetuneConfig;
use forgedit::pipeline::Pipeline;
use forgedit::store::ArtifactStore;

pub const STORE_DIR_ENV: &str = "FORGEDIT_STORE_DIR";
pub const BACKEND_ENV: &str = "FORGEDIT_BACKEND";
pub const REMOTE_URL_ENV: &str = "FORGEDIT_REMOTE_URL";
pub const WEBUI_DIR_ENV: &str = "FORGEDIT_WEBUI_DIR";
pub const FINETUNE_CONFIG_ENV: &str = "FORGEDIT_FINETUNE_CONFIG";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackendKind {
    Toy,
    Remote,
}

pub fn backend_kind() -> anyhow::Result<BackendKind> {
    match std::env::var(BACKEND_ENV).as_deref() {
        Err(_) | Ok("toy") | Ok("") => Ok(BackendKind::Toy),
        Ok("remote") => Ok(BackendKind::Remote),
        Ok(other) => bail!("{BACKEND_ENV} must be toy or remote, got {other:?}"),
    }
}

pub fn build_backend(kind: BackendKind) -> anyhow::Result<Arc<dyn Backend>> {
    match kind {
        BackendKind::Toy => Ok(Arc::new(ToyBackend::standard())),
        BackendKind::Remote => remote_backend(),
    }
}

#[cfg(feature = "remote")]
fn remote_backend() -> anyhow::Result<Arc<dyn Backend>> {
    let url = std::env::var(REMOTE_URL_ENV).with_context(|| format!("{REMOTE_URL_ENV} is not set"))?;
    let backend = forgedit::backend::remote::RemoteBackend::connect(&url, std::time::Duration::from_secs(120))?;
    Ok(Arc::new(backend))
}

#[cfg(not(feature = "remote"))]
fn remote_backend() -> anyhow::Result<Arc<dyn Backend>> {
    bail!("this build has no remote backend; rebuild with --features remote")
}

/// The one finetune configuration of this deployment: defaults, or a JSON
/// file named by `FORGEDIT_FINETUNE_CONFIG`.
pub fn finetune_config() -> anyhow::Result<FinetuneConfig> {
    match std::env::var(FINETUNE_CONFIG_ENV) {
        Ok(path) => {
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {path}"))?;
            Ok(serde_json::from_str(&text).with_context(|| format!("parsing {path}"))?)
        }
        Err(_) => Ok(FinetuneConfig::default()),
    }
}

pub fn store_dir(explicit: Option<PathBuf>) -> PathBuf {
    explicit
        .or_else(|| std::env::var_os(STORE_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("forgedit-store"))
}

pub fn webui_dir() -> PathBuf {
    std::env::var_os(WEBUI_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("webui/dist"))
}

pub fn build_pipeline(store: PathBuf, captioner: CaptionerConfig) -> anyhow::Result<Pipeline> {
    let store = ArtifactStore::open(&store).with_context(|| format!("opening store {}", store.display()))?;
    let backend = build_backend(backend_kind()?)?;
    Ok(Pipeline::new(store, backend, captioner, finetune_config()?)?)
}
