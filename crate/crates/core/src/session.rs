//! The persisted record of one image's editing lifecycle.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::pipeline::{NextAction, SamplerSettings, StateValue, SweepResult, WorkflowState};
use crate::store::ArtifactId;
use crate::types::{Prompt, Verdict};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRefs {
    pub original: Option<ArtifactId>,
    pub finetuned: Option<ArtifactId>,
}

/// Summary of the single finetune run a session owns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub loss_curve_ref: ArtifactId,
    pub steps_run: usize,
    pub first_loss: f64,
    pub last_loss: f64,
    pub elapsed_secs: f64,
    pub budget_exceeded: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditSession {
    pub schema_version: u32,
    pub id: String,
    pub input_image: ArtifactId,
    pub source_prompt: Prompt,
    pub target_prompt: Prompt,
    pub checkpoint_refs: CheckpointRefs,
    /// Encoded source prompt before optimization.
    pub source_embedding_ref: Option<ArtifactId>,
    /// The source embedding after joint finetuning.
    pub optimized_embedding_ref: Option<ArtifactId>,
    pub target_embedding_ref: Option<ArtifactId>,
    pub finetune: Option<FinetuneRecord>,
    pub sweeps: Vec<SweepResult>,
    pub verdicts: Vec<Verdict>,
    pub state: WorkflowState,
    /// Image picked by the Success verdict.
    pub final_image: Option<ArtifactId>,
    pub failure: Option<String>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

impl EditSession {
    pub fn new(input_image: ArtifactId, source_prompt: Prompt, target_prompt: Prompt) -> Self {
        let now = Utc::now();
        EditSession {
            schema_version: SCHEMA_VERSION,
            id: uuid::Uuid::new_v4().simple().to_string(),
            input_image,
            source_prompt,
            target_prompt,
            checkpoint_refs: CheckpointRefs::default(),
            source_embedding_ref: None,
            optimized_embedding_ref: None,
            target_embedding_ref: None,
            finetune: None,
            sweeps: Vec::new(),
            verdicts: Vec::new(),
            state: WorkflowState::default(),
            final_image: None,
            failure: None,
            created_at: now,
            updated_at: now,
        }
    }

    pub fn touch(&mut self) {
        self.updated_at = Utc::now();
    }

    pub fn last_sweep(&self) -> Option<&SweepResult> {
        self.sweeps.last()
    }
}

/// One line of a session's JSON-lines event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SessionEvent {
    Created {
        session_id: String,
        input_image: ArtifactId,
        source_prompt: Prompt,
        target_prompt: Prompt,
        at: DateTime<Utc>,
    },
    Transition {
        from: StateValue,
        to: StateValue,
        at: DateTime<Utc>,
    },
    FinetuneCompleted {
        optimized_embedding: ArtifactId,
        finetuned_checkpoint: ArtifactId,
        steps_run: usize,
        at: DateTime<Utc>,
    },
    Sweep {
        action: NextAction,
        settings: SamplerSettings,
        sweep_id: String,
        at: DateTime<Utc>,
    },
    Verdict {
        verdict: Verdict,
        next: Option<NextAction>,
        at: DateTime<Utc>,
    },
}
