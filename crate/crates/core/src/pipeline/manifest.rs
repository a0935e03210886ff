//! The artifact ids a session produced, without ids, timestamps or timings
//! that differ between otherwise identical runs.

use serde::{Deserialize, Serialize};

use super::{EditMode, StateValue};
use crate::forgetting::ForgettingStrategy;
use crate::session::EditSession;
use crate::store::ArtifactId;
use crate::types::Verdict;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestSweep {
    pub mode: EditMode,
    pub strategy: ForgettingStrategy,
    pub grid: Vec<f64>,
    pub merged_checkpoint: ArtifactId,
    pub images: Vec<Option<ArtifactId>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub input_image: ArtifactId,
    pub source_prompt: String,
    pub target_prompt: String,
    pub source_embedding: Option<ArtifactId>,
    pub optimized_embedding: Option<ArtifactId>,
    pub target_embedding: Option<ArtifactId>,
    pub original_checkpoint: Option<ArtifactId>,
    pub finetuned_checkpoint: Option<ArtifactId>,
    pub loss_curve: Option<ArtifactId>,
    pub sweeps: Vec<ManifestSweep>,
    pub verdicts: Vec<Verdict>,
    pub final_image: Option<ArtifactId>,
    pub state: StateValue,
}

impl Manifest {
    pub fn from_session(session: &EditSession) -> Self {
        Manifest {
            input_image: session.input_image.clone(),
            source_prompt: session.source_prompt.text().to_owned(),
            target_prompt: session.target_prompt.text().to_owned(),
            source_embedding: session.source_embedding_ref.clone(),
            optimized_embedding: session.optimized_embedding_ref.clone(),
            target_embedding: session.target_embedding_ref.clone(),
            original_checkpoint: session.checkpoint_refs.original.clone(),
            finetuned_checkpoint: session.checkpoint_refs.finetuned.clone(),
            loss_curve: session.finetune.as_ref().map(|f| f.loss_curve_ref.clone()),
            sweeps: session
                .sweeps
                .iter()
                .map(|s| ManifestSweep {
                    mode: s.mode,
                    strategy: s.strategy.clone(),
                    grid: s.grid.clone(),
                    merged_checkpoint: s.merged_checkpoint.clone(),
                    images: s.images.clone(),
                })
                .collect(),
            verdicts: session.verdicts.clone(),
            final_image: session.final_image.clone(),
            state: session.state.value,
        }
    }
}
