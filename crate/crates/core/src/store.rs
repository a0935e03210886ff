//! Content-addressed artifact store and session persistence.
//!
//! Layout under the store root:
//!
//! ```text
//! artifacts/<kind>/<sha256-hex>     immutable payloads
//! sessions/<session-id>.json        latest persisted session document
//! sessions/<session-id>.events.jsonl
//! ```

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::ParameterSnapshot;
use crate::error::{Error, Result};
use crate::session::{EditSession, SessionEvent, SCHEMA_VERSION};
use crate::types::{ImageTensor, TextEmbedding};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ArtifactKind {
    Image,
    Embedding,
    Checkpoint,
    Session,
    /// JSON loss curves and other small finetune records.
    Curve,
}

impl ArtifactKind {
    pub const ALL: [ArtifactKind; 5] = [
        ArtifactKind::Image,
        ArtifactKind::Embedding,
        ArtifactKind::Checkpoint,
        ArtifactKind::Session,
        ArtifactKind::Curve,
    ];

    pub fn dir_name(self) -> &'static str {
        match self {
            ArtifactKind::Image => "image",
            ArtifactKind::Embedding => "embedding",
            ArtifactKind::Checkpoint => "checkpoint",
            ArtifactKind::Session => "session",
            ArtifactKind::Curve => "curve",
        }
    }
}

/// Hex SHA-256 of an artifact payload.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ArtifactId(String);

impl ArtifactId {
    pub fn for_payload(payload: &[u8]) -> Self {
        ArtifactId(hex::encode(Sha256::digest(payload)))
    }

    /// Accepts only 64 lowercase hex characters, so ids can never escape the
    /// artifact directory.
    pub fn parse(s: &str) -> Result<Self> {
        if s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
            Ok(ArtifactId(s.to_owned()))
        } else {
            Err(Error::NotFound(format!("malformed artifact id {s:?}")))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ArtifactId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug)]
pub struct ArtifactStore {
    root: PathBuf,
}

impl ArtifactStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for kind in ArtifactKind::ALL {
            fs::create_dir_all(root.join("artifacts").join(kind.dir_name()))?;
        }
        fs::create_dir_all(root.join("sessions"))?;
        Ok(ArtifactStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn artifact_path(&self, kind: ArtifactKind, id: &ArtifactId) -> PathBuf {
        self.root.join("artifacts").join(kind.dir_name()).join(id.as_str())
    }

    pub fn store_artifact(&self, kind: ArtifactKind, payload: &[u8]) -> Result<ArtifactId> {
        if payload.is_empty() {
            return Err(Error::contract("refusing to store an empty artifact"));
        }
        let id = ArtifactId::for_payload(payload);
        let path = self.artifact_path(kind, &id);
        if !path.exists() {
            write_atomic(&path, payload)?;
        }
        Ok(id)
    }

    pub fn load_artifact(&self, kind: ArtifactKind, id: &ArtifactId) -> Result<Vec<u8>> {
        let path = self.artifact_path(kind, id);
        fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                Error::NotFound(format!("{} artifact {id}", kind.dir_name()))
            }
            _ => Error::Io(e),
        })
    }

    pub fn has_artifact(&self, kind: ArtifactKind, id: &ArtifactId) -> bool {
        self.artifact_path(kind, id).is_file()
    }

    pub fn store_image(&self, image: &ImageTensor) -> Result<ArtifactId> {
        self.store_artifact(ArtifactKind::Image, &image.to_png()?)
    }

    pub fn load_image(&self, id: &ArtifactId) -> Result<ImageTensor> {
        ImageTensor::from_png(&self.load_artifact(ArtifactKind::Image, id)?)
    }

    pub fn store_embedding(&self, embedding: &TextEmbedding) -> Result<ArtifactId> {
        self.store_artifact(ArtifactKind::Embedding, &embedding.to_bytes())
    }

    pub fn load_embedding(&self, id: &ArtifactId) -> Result<TextEmbedding> {
        TextEmbedding::from_bytes(&self.load_artifact(ArtifactKind::Embedding, id)?)
    }

    pub fn store_checkpoint(&self, snapshot: &ParameterSnapshot) -> Result<ArtifactId> {
        self.store_artifact(ArtifactKind::Checkpoint, &snapshot.to_checkpoint_bytes())
    }

    pub fn load_checkpoint(&self, id: &ArtifactId) -> Result<ParameterSnapshot> {
        ParameterSnapshot::from_checkpoint_bytes(&self.load_artifact(ArtifactKind::Checkpoint, id)?)
    }

    fn session_path(&self, id: &str) -> Result<PathBuf> {
        if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(Error::NotFound(format!("session {id:?}")));
        }
        Ok(self.root.join("sessions").join(format!("{id}.json")))
    }

    fn events_path(&self, id: &str) -> Result<PathBuf> {
        Ok(self.session_path(id)?.with_extension("events.jsonl"))
    }

    /// Persists the session document.
    ///
    /// Rejects writes that would shrink or rewrite the append-only sweep and
    /// verdict lists, or change the original checkpoint once recorded.
    pub fn save_session(&self, session: &EditSession) -> Result<()> {
        let path = self.session_path(&session.id)?;
        if path.exists() {
            let previous = self.load_session(&session.id)?;
            check_append_only(&previous, session)?;
        }
        let json = serde_json::to_vec_pretty(session)?;
        self.store_artifact(ArtifactKind::Session, &json)?;
        write_atomic(&path, &json)
    }

    pub fn load_session(&self, id: &str) -> Result<EditSession> {
        let path = self.session_path(id)?;
        let bytes = fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(format!("session {id}")),
            _ => Error::Io(e),
        })?;
        let session: EditSession = serde_json::from_slice(&bytes)?;
        if session.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "session {id} has schema_version {}, this build reads {SCHEMA_VERSION}",
                session.schema_version
            )));
        }
        Ok(session)
    }

    pub fn list_sessions(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(self.root.join("sessions"))? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if let Some(id) = name.strip_suffix(".json") {
                ids.push(id.to_owned());
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn append_event(&self, session_id: &str, event: &SessionEvent) -> Result<()> {
        let mut line = serde_json::to_vec(event)?;
        line.push(b'\n');
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.events_path(session_id)?)?;
        file.write_all(&line)?;
        Ok(())
    }

    pub fn load_events(&self, session_id: &str) -> Result<Vec<SessionEvent>> {
        let path = self.events_path(session_id)?;
        if !path.exists() {
            return Err(Error::NotFound(format!("event log for session {session_id}")));
        }
        let mut events = Vec::new();
        for line in BufReader::new(fs::File::open(path)?).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                events.push(serde_json::from_str(&line)?);
            }
        }
        Ok(events)
    }
}

fn check_append_only(previous: &EditSession, next: &EditSession) -> Result<()> {
    if !next.sweeps.starts_with(&previous.sweeps) {
        return Err(Error::contract("sweep history is append-only"));
    }
    if !next.verdicts.starts_with(&previous.verdicts) {
        return Err(Error::contract("verdict history is append-only"));
    }
    if previous.checkpoint_refs.original.is_some()
        && previous.checkpoint_refs.original != next.checkpoint_refs.original
    {
        return Err(Error::contract("the original checkpoint reference is immutable"));
    }
    Ok(())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("tmp-{}", uuid::Uuid::new_v4().simple()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
