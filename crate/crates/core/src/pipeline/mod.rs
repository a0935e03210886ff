//! Session orchestration: finetune once, sweep, judge, repeat.
//!
//! [`Pipeline`] owns the store, the backend and the deployment-wide
//! configuration. Every mutating operation takes the session id, holds the
//! session's single-writer slot for its duration, persists the new session
//! document and appends to the event log.

mod case;
mod manifest;
mod sampler;
mod workflow;

use std::collections::HashSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use case::{run_case, Case, CaseImage, CaseStep};
pub use manifest::{Manifest, ManifestSweep};
pub use sampler::{sample, sampling_timesteps, SamplerSettings};
pub use workflow::{decide, manual_fallback_rule, EditMode, NextAction, Outcome, StateValue, WorkflowState};

use crate::backend::Backend;
use crate::captioner::{generate_source_prompt, CaptionerConfig};
use crate::edit::{vector_project, vector_subtract, GammaGrid, ProjectionCoefficients};
use crate::error::{Error, Result};
use crate::finetune::{finetune, FinetuneConfig, LossPoint};
use crate::forgetting::{apply_strategy, ForgettingStrategy};
use crate::session::{EditSession, FinetuneRecord, SessionEvent};
use crate::store::{ArtifactId, ArtifactKind, ArtifactStore};
use crate::types::{ImageTensor, Prompt, Verdict};

/// A grid slot whose image could not be produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotFailure {
    pub index: usize,
    pub error: String,
}

/// One batch of images over a γ (or β) grid under a fixed strategy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub id: String,
    pub mode: EditMode,
    pub strategy: ForgettingStrategy,
    pub grid: Vec<f64>,
    pub alpha: Option<f64>,
    /// One entry per grid value; `None` marks a failed slot.
    pub images: Vec<Option<ArtifactId>>,
    pub failures: Vec<SlotFailure>,
    pub merged_checkpoint: ArtifactId,
    pub sampler: SamplerSettings,
    pub elapsed_secs: f64,
}

/// Operator overrides for a sweep; unset fields come from the session's
/// current recommendation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepRequest {
    #[serde(default)]
    pub mode: Option<EditMode>,
    #[serde(default)]
    pub strategy: Option<ForgettingStrategy>,
    #[serde(default)]
    pub grid: Option<GammaGrid>,
    #[serde(default)]
    pub alpha: Option<f64>,
}

impl SweepRequest {
    pub fn resolve(&self, recommendation: Option<&NextAction>) -> NextAction {
        let mut action = recommendation.cloned().unwrap_or_else(NextAction::initial);
        if let Some(mode) = self.mode {
            action.mode = mode;
        }
        if let Some(strategy) = &self.strategy {
            action.strategy = strategy.clone();
            action.needs_manual = false;
        }
        if let Some(grid) = &self.grid {
            action.grid = grid.clone();
        }
        action.alpha = match action.mode {
            EditMode::Subtraction => None,
            EditMode::Projection => Some(self.alpha.or(action.alpha).unwrap_or(1.0)),
        };
        action
    }
}

pub struct Pipeline {
    store: ArtifactStore,
    backend: Arc<dyn Backend>,
    captioner: CaptionerConfig,
    finetune: FinetuneConfig,
    sampler: SamplerSettings,
    active: Mutex<HashSet<String>>,
}

/// Holds a session's single-writer slot until dropped.
struct WriterSlot<'a> {
    active: &'a Mutex<HashSet<String>>,
    id: String,
}

impl Drop for WriterSlot<'_> {
    fn drop(&mut self) {
        self.active.lock().unwrap_or_else(|p| p.into_inner()).remove(&self.id);
    }
}

impl Pipeline {
    pub fn new(
        store: ArtifactStore,
        backend: Arc<dyn Backend>,
        captioner: CaptionerConfig,
        finetune: FinetuneConfig,
    ) -> Result<Self> {
        captioner.validate()?;
        finetune.validate()?;
        Ok(Pipeline {
            store,
            backend,
            captioner,
            finetune,
            sampler: SamplerSettings::default(),
            active: Mutex::new(HashSet::new()),
        })
    }

    pub fn with_sampler_defaults(mut self, sampler: SamplerSettings) -> Result<Self> {
        sampler.validate(self.backend.spec().diffusion_steps)?;
        self.sampler = sampler;
        Ok(self)
    }

    pub fn store(&self) -> &ArtifactStore {
        &self.store
    }

    pub fn backend(&self) -> &dyn Backend {
        self.backend.as_ref()
    }

    pub fn finetune_config(&self) -> &FinetuneConfig {
        &self.finetune
    }

    pub fn sampler_defaults(&self) -> SamplerSettings {
        self.sampler
    }

    pub fn load_session(&self, id: &str) -> Result<EditSession> {
        self.store.load_session(id)
    }

    fn claim(&self, id: &str) -> Result<WriterSlot<'_>> {
        let mut active = self.active.lock().unwrap_or_else(|p| p.into_inner());
        if !active.insert(id.to_owned()) {
            return Err(Error::state(format!("session {id} already has an active job")));
        }
        Ok(WriterSlot { active: &self.active, id: id.to_owned() })
    }

    fn transition(&self, session: &mut EditSession, to: StateValue) -> Result<()> {
        let from = session.state.value;
        if !from.can_transition_to(to) {
            return Err(Error::state(format!("cannot move from {from:?} to {to:?}")));
        }
        session.state.value = to;
        session.touch();
        self.store.save_session(session)?;
        self.store.append_event(
            &session.id,
            &SessionEvent::Transition { from, to, at: session.updated_at },
        )
    }

    /// Records a new session in `Created`. The source prompt comes from the
    /// captioner unless one is supplied.
    pub fn begin_session(
        &self,
        image: &ImageTensor,
        target_prompt: &str,
        source_prompt: Option<&str>,
    ) -> Result<EditSession> {
        self.backend.spec().check_image(image)?;
        let target = Prompt::user(target_prompt)?;
        let source = match source_prompt {
            Some(text) => Prompt::user(text)?,
            None => generate_source_prompt(image, &self.captioner)?,
        };
        self.begin_with_prompts(image, source, target)
    }

    fn begin_with_prompts(
        &self,
        image: &ImageTensor,
        source: Prompt,
        target: Prompt,
    ) -> Result<EditSession> {
        self.backend.spec().check_image(image)?;
        let e_src = self.backend.encode_text(&source)?;
        let e_tgt = self.backend.encode_text(&target)?;
        let mut session = EditSession::new(self.store.store_image(image)?, source, target);
        session.source_embedding_ref = Some(self.store.store_embedding(&e_src)?);
        session.target_embedding_ref = Some(self.store.store_embedding(&e_tgt)?);
        session.checkpoint_refs.original = Some(self.store.store_checkpoint(self.backend.pretrained())?);
        self.store.save_session(&session)?;
        self.store.append_event(
            &session.id,
            &SessionEvent::Created {
                session_id: session.id.clone(),
                input_image: session.input_image.clone(),
                source_prompt: session.source_prompt.clone(),
                target_prompt: session.target_prompt.clone(),
                at: session.created_at,
            },
        )?;
        tracing::info!(session = %session.id, source = %session.source_prompt, "session created");
        Ok(session)
    }

    /// Runs the session's one finetune with the deployment-wide config.
    pub fn finetune_session(
        &self,
        id: &str,
        on_step: impl FnMut(&LossPoint),
    ) -> Result<EditSession> {
        let _slot = self.claim(id)?;
        let mut session = self.store.load_session(id)?;
        if session.state.value != StateValue::Created {
            return Err(Error::state(format!(
                "finetuning runs once per session; session is {:?}",
                session.state.value
            )));
        }
        self.transition(&mut session, StateValue::Finetuning)?;

        let image = self.store.load_image(&session.input_image)?;
        let result = match finetune(
            self.backend.as_ref(),
            &image,
            &session.source_prompt,
            &self.finetune,
            on_step,
        ) {
            Ok(r) => r,
            Err(e) => {
                session.failure = Some(e.to_string());
                self.transition(&mut session, StateValue::Failed)?;
                return Err(e);
            }
        };

        let embedding = self.store.store_embedding(&result.optimized_embedding)?;
        let checkpoint = self.store.store_checkpoint(&result.finetuned_params)?;
        let curve = self
            .store
            .store_artifact(ArtifactKind::Curve, &serde_json::to_vec(&result.loss_curve)?)?;
        session.optimized_embedding_ref = Some(embedding.clone());
        session.checkpoint_refs.finetuned = Some(checkpoint.clone());
        session.finetune = Some(FinetuneRecord {
            loss_curve_ref: curve,
            steps_run: result.loss_curve.len(),
            first_loss: result.loss_curve.first().map_or(f64::NAN, |p| p.loss),
            last_loss: result.loss_curve.last().map_or(f64::NAN, |p| p.loss),
            elapsed_secs: result.elapsed_secs,
            budget_exceeded: result.budget_exceeded,
        });
        session.state.last_recommendation = Some(NextAction::initial());
        self.store.append_event(
            id,
            &SessionEvent::FinetuneCompleted {
                optimized_embedding: embedding,
                finetuned_checkpoint: checkpoint,
                steps_run: result.loss_curve.len(),
                at: chrono::Utc::now(),
            },
        )?;
        self.transition(&mut session, StateValue::AwaitingVerdict)?;
        Ok(session)
    }

    /// [`begin_session`](Self::begin_session) followed by the finetune.
    /// The session ends in `AwaitingVerdict` with the default subtraction
    /// sweep as its recommendation.
    pub fn create_session(
        &self,
        image: &ImageTensor,
        target_prompt: &str,
        source_prompt: Option<&str>,
        on_step: impl FnMut(&LossPoint),
    ) -> Result<EditSession> {
        let session = self.begin_session(image, target_prompt, source_prompt)?;
        self.finetune_session(&session.id, on_step)
    }

    /// Samples one image per grid value and appends the sweep.
    ///
    /// `on_progress(done, total)` is called as images complete, possibly
    /// from worker threads.
    pub fn run_sweep(
        &self,
        id: &str,
        action: &NextAction,
        settings: Option<SamplerSettings>,
        on_progress: impl Fn(usize, usize) + Sync,
    ) -> Result<SweepResult> {
        let _slot = self.claim(id)?;
        let mut session = self.store.load_session(id)?;
        if session.state.value != StateValue::AwaitingVerdict {
            return Err(Error::state(format!(
                "sweeps need a finetuned session awaiting a verdict; session is {:?}",
                session.state.value
            )));
        }
        action.validate()?;
        let settings = settings.unwrap_or(self.sampler);
        settings.validate(self.backend.spec().diffusion_steps)?;
        let started = Instant::now();

        let missing = || Error::state("session has no finetune artifacts");
        let e_opt = self.store.load_embedding(session.optimized_embedding_ref.as_ref().ok_or_else(missing)?)?;
        let e_tgt = self.store.load_embedding(session.target_embedding_ref.as_ref().ok_or_else(missing)?)?;
        let original = self.store.load_checkpoint(session.checkpoint_refs.original.as_ref().ok_or_else(missing)?)?;
        let finetuned = self.store.load_checkpoint(session.checkpoint_refs.finetuned.as_ref().ok_or_else(missing)?)?;
        let merged = apply_strategy(&original, &finetuned, &action.strategy)?;
        let merged_checkpoint = self.store.store_checkpoint(&merged)?;

        let total = action.grid.len();
        let done = AtomicUsize::new(0);
        let slots: Vec<Result<ArtifactId>> = action
            .grid
            .values()
            .par_iter()
            .map(|&value| {
                let e_edit = match action.mode {
                    EditMode::Subtraction => vector_subtract(&e_opt, &e_tgt, value)?,
                    EditMode::Projection => vector_project(
                        &e_opt,
                        &e_tgt,
                        ProjectionCoefficients::new(action.alpha.unwrap_or(1.0), value)?,
                    )?,
                };
                let image = sample(self.backend.as_ref(), &merged, &e_edit, &settings);
                on_progress(done.fetch_add(1, Ordering::SeqCst) + 1, total);
                self.store.store_image(&image?)
            })
            .collect();

        let mut images = Vec::with_capacity(total);
        let mut failures = Vec::new();
        for (index, slot) in slots.into_iter().enumerate() {
            match slot {
                Ok(id) => images.push(Some(id)),
                Err(e) => {
                    tracing::warn!(session = id, index, error = %e, "sweep slot failed");
                    failures.push(SlotFailure { index, error: e.to_string() });
                    images.push(None);
                }
            }
        }

        let mut sweep = SweepResult {
            id: String::new(),
            mode: action.mode,
            strategy: action.strategy.clone(),
            grid: action.grid.values().to_vec(),
            alpha: action.alpha,
            images,
            failures,
            merged_checkpoint,
            sampler: settings,
            elapsed_secs: 0.0,
        };
        sweep.id = sweep_id(session.sweeps.len(), &sweep)?;
        sweep.elapsed_secs = started.elapsed().as_secs_f64();

        session.sweeps.push(sweep.clone());
        session.state.last_recommendation = None;
        self.store.append_event(
            id,
            &SessionEvent::Sweep {
                action: action.clone(),
                settings,
                sweep_id: sweep.id.clone(),
                at: chrono::Utc::now(),
            },
        )?;
        self.transition(&mut session, StateValue::AwaitingVerdict)?;
        Ok(sweep)
    }

    /// Judges the latest sweep and returns what to do next.
    pub fn record_verdict(&self, id: &str, verdict: &Verdict) -> Result<Outcome> {
        let _slot = self.claim(id)?;
        let mut session = self.store.load_session(id)?;
        if session.state.value != StateValue::AwaitingVerdict {
            return Err(Error::state(format!(
                "verdicts need a session awaiting one; session is {:?}",
                session.state.value
            )));
        }
        if session.sweeps.is_empty() {
            return Err(Error::state("no sweep has been run yet"));
        }
        if session.verdicts.len() >= session.sweeps.len() {
            return Err(Error::state("the latest sweep was already judged; run the next sweep"));
        }
        let outcome = decide(&session.sweeps, verdict)?;
        session.verdicts.push(verdict.clone());
        let next = match &outcome {
            Outcome::Done { chosen_image } => {
                session.final_image = session.sweeps.last().and_then(|s| s.images[*chosen_image].clone());
                session.state.last_recommendation = None;
                None
            }
            Outcome::Next(action) => {
                session.state.last_recommendation = Some(action.clone());
                Some(action.clone())
            }
        };
        self.store.append_event(
            id,
            &SessionEvent::Verdict { verdict: verdict.clone(), next, at: chrono::Utc::now() },
        )?;
        let to = match outcome {
            Outcome::Done { .. } => StateValue::Done,
            Outcome::Next(_) => StateValue::AwaitingVerdict,
        };
        self.transition(&mut session, to)?;
        Ok(outcome)
    }

    /// Marks the session failed.
    pub fn abort(&self, id: &str, reason: &str) -> Result<EditSession> {
        let _slot = self.claim(id)?;
        let mut session = self.store.load_session(id)?;
        session.failure = Some(reason.to_owned());
        self.transition(&mut session, StateValue::Failed)?;
        Ok(session)
    }

    /// Re-executes a session's event log as a new session.
    ///
    /// With the same backend and configuration the replayed session holds
    /// the same artifact ids as the original.
    pub fn replay(&self, id: &str) -> Result<EditSession> {
        let events = self.store.load_events(id)?;
        let Some(SessionEvent::Created { input_image, source_prompt, target_prompt, .. }) = events.first()
        else {
            return Err(Error::contract(format!("event log of {id} does not start with creation")));
        };
        let image = self.store.load_image(input_image)?;
        let replayed = self.begin_with_prompts(&image, source_prompt.clone(), target_prompt.clone())?;
        let rid = replayed.id.clone();
        for event in &events[1..] {
            match event {
                SessionEvent::FinetuneCompleted { .. } => {
                    self.finetune_session(&rid, |_| {})?;
                }
                SessionEvent::Sweep { action, settings, .. } => {
                    self.run_sweep(&rid, action, Some(*settings), |_, _| {})?;
                }
                SessionEvent::Verdict { verdict, .. } => {
                    self.record_verdict(&rid, verdict)?;
                }
                SessionEvent::Transition { to: StateValue::Failed, .. } => {
                    let reason = self.store.load_session(id)?.failure.unwrap_or_default();
                    if self.store.load_session(&rid)?.state.value != StateValue::Failed {
                        self.abort(&rid, &reason)?;
                    }
                }
                SessionEvent::Transition { .. } | SessionEvent::Created { .. } => {}
            }
        }
        self.store.load_session(&rid)
    }
}

/// Content hash of a sweep, excluding its id and timing.
fn sweep_id(index: usize, sweep: &SweepResult) -> Result<String> {
    let mut hasher = Sha256::new();
    hasher.update((index as u64).to_le_bytes());
    hasher.update(serde_json::to_vec(&(
        &sweep.mode,
        &sweep.strategy,
        &sweep.grid,
        &sweep.alpha,
        &sweep.images,
        &sweep.failures,
        &sweep.merged_checkpoint,
        &sweep.sampler,
    ))?);
    Ok(hex::encode(hasher.finalize()))
}
