//! Scripted end-to-end runs: an image, prompts and a list of sweeps and
//! verdicts, replayed against a [`Pipeline`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{NextAction, Pipeline, SamplerSettings, SweepRequest};
use crate::error::{Error, Result};
use crate::session::EditSession;
use crate::synthetic::{gradient_scene, polar_bear_scene};
use crate::types::{ImageTensor, Verdict};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseImage {
    /// A built-in procedural scene: `polar_bear` or `gradient`.
    Synthetic { scene: String, size: usize },
    /// A PNG file, relative to the case file.
    Path(PathBuf),
}

impl CaseImage {
    pub fn load(&self, base_dir: &Path) -> Result<ImageTensor> {
        match self {
            CaseImage::Synthetic { scene, size } => match scene.as_str() {
                "polar_bear" => Ok(polar_bear_scene(*size)),
                "gradient" => Ok(gradient_scene(*size)),
                other => Err(Error::contract(format!("unknown synthetic scene {other:?}"))),
            },
            CaseImage::Path(path) => ImageTensor::from_png(&std::fs::read(base_dir.join(path))?),
        }
    }
}

/// One scripted operator action after session creation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseStep {
    /// Runs a sweep; empty overrides run the current recommendation.
    Sweep(SweepRequest),
    Verdict(Verdict),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Case {
    pub name: String,
    pub image: CaseImage,
    pub target_prompt: String,
    #[serde(default)]
    pub source_prompt: Option<String>,
    /// Stub captioner table, image digest to caption.
    #[serde(default)]
    pub captions: BTreeMap<String, String>,
    #[serde(default)]
    pub sampler: Option<SamplerSettings>,
    pub steps: Vec<CaseStep>,
}

impl Case {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Contract(format!("{}: {e}", path.display())))
    }
}

/// Creates the session (finetune plus the default first sweep), then
/// applies every scripted step in order.
pub fn run_case(pipeline: &Pipeline, case: &Case, base_dir: &Path) -> Result<EditSession> {
    let image = case.image.load(base_dir)?;
    let session = pipeline.create_session(&image, &case.target_prompt, case.source_prompt.as_deref(), |_| {})?;
    let id = session.id;
    pipeline.run_sweep(&id, &NextAction::initial(), case.sampler, |_, _| {})?;
    for step in &case.steps {
        match step {
            CaseStep::Sweep(request) => {
                let session = pipeline.load_session(&id)?;
                let action = request.resolve(session.state.last_recommendation.as_ref());
                pipeline.run_sweep(&id, &action, case.sampler, |_, _| {})?;
            }
            CaseStep::Verdict(verdict) => {
                pipeline.record_verdict(&id, verdict)?;
            }
        }
    }
    pipeline.load_session(&id)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn case_files_parse() {
        let json = r#"{
            "name": "bear",
            "image": {"synthetic": {"scene": "polar_bear", "size": 16}},
            "target_prompt": "A polar bear raising its hand",
            "steps": [
                {"verdict": {"kind": "Overfit", "intention": "Structure"}},
                {"sweep": {}},
                {"sweep": {"strategy": "decoderattn", "grid": [1.0, 1.2]}},
                {"verdict": {"kind": "Success", "chosen_image": 1}}
            ]
        }"#;
        let case: Case = serde_json::from_str(json).unwrap();
        assert_eq!(case.steps.len(), 4);
        assert!(matches!(&case.steps[2], CaseStep::Sweep(r) if r.grid.as_ref().unwrap().len() == 2));
        assert_eq!(case.image.load(Path::new(".")).unwrap(), polar_bear_scene(16));
    }
}
