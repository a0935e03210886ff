//! The session state machine and the verdict decision table.

use serde::{Deserialize, Serialize};

use crate::backend::ParameterRole;
use crate::edit::GammaGrid;
use crate::error::{Error, Result};
use crate::forgetting::{CustomRule, ForgettingStrategy, Source};
use crate::backend::LayerKind;
use crate::pipeline::SweepResult;
use crate::types::{EditIntention, Verdict, VerdictKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StateValue {
    Created,
    Finetuning,
    AwaitingVerdict,
    Done,
    Failed,
}

impl StateValue {
    pub fn can_transition_to(self, next: StateValue) -> bool {
        use StateValue::*;
        matches!(
            (self, next),
            (Created, Finetuning)
                | (Finetuning, AwaitingVerdict)
                | (AwaitingVerdict, AwaitingVerdict)
                | (AwaitingVerdict, Done)
                | (Created | Finetuning | AwaitingVerdict, Failed)
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, StateValue::Done | StateValue::Failed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkflowState {
    pub value: StateValue,
    /// What the workflow suggests running next.
    pub last_recommendation: Option<NextAction>,
}

impl Default for WorkflowState {
    fn default() -> Self {
        WorkflowState { value: StateValue::Created, last_recommendation: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EditMode {
    Subtraction,
    Projection,
}

impl std::str::FromStr for EditMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "subtraction" => Ok(EditMode::Subtraction),
            "projection" => Ok(EditMode::Projection),
            _ => Err(Error::contract(format!("unknown edit mode {s:?}"))),
        }
    }
}

/// A sweep to run: the edit path, the forgetting strategy and the grid of
/// γ (subtraction) or β (projection) values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NextAction {
    pub mode: EditMode,
    pub strategy: ForgettingStrategy,
    pub grid: GammaGrid,
    /// Weight on the e_opt direction for projection sweeps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Set once both default strategies have been tried; the suggested
    /// custom rule is only a starting point for the operator.
    #[serde(default)]
    pub needs_manual: bool,
}

impl NextAction {
    /// Vector subtraction over the default γ grid with the given strategy.
    pub fn subtraction(strategy: ForgettingStrategy) -> Self {
        NextAction {
            mode: EditMode::Subtraction,
            strategy,
            grid: GammaGrid::default_grid(),
            alpha: None,
            needs_manual: false,
        }
    }

    /// Vector projection with α = 1 and β swept over the default grid.
    pub fn projection(strategy: ForgettingStrategy) -> Self {
        NextAction {
            mode: EditMode::Projection,
            strategy,
            grid: GammaGrid::default_grid(),
            alpha: Some(1.0),
            needs_manual: false,
        }
    }

    /// The first sweep of every session.
    pub fn initial() -> Self {
        Self::subtraction(ForgettingStrategy::None)
    }

    pub fn validate(&self) -> Result<()> {
        match (self.mode, self.alpha) {
            (EditMode::Subtraction, Some(_)) => {
                Err(Error::contract("alpha only applies to projection sweeps"))
            }
            (EditMode::Projection, Some(a)) if !a.is_finite() => {
                Err(Error::contract("alpha must be finite"))
            }
            _ => Ok(()),
        }
    }
}

/// Result of judging a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Done { chosen_image: usize },
    Next(NextAction),
}

/// Custom rule suggested when both default strategies already overfit:
/// forget the non-attention parameters of encoder and decoder together.
pub fn manual_fallback_rule() -> CustomRule {
    CustomRule::from_fn(|role: ParameterRole| match (role.region, role.kind) {
        (crate::backend::Region::Middle, _) | (_, LayerKind::Attention) => Source::Finetuned,
        _ => Source::Original,
    })
}

fn strategy_for(intention: EditIntention) -> ForgettingStrategy {
    match intention {
        EditIntention::Structure => ForgettingStrategy::EncoderAttn,
        EditIntention::Appearance => ForgettingStrategy::DecoderAttn,
    }
}

/// Maps a verdict on the latest of `sweeps` to the next step.
///
/// Pure: depends only on the sweep history and the verdict.
pub fn decide(sweeps: &[SweepResult], verdict: &Verdict) -> Result<Outcome> {
    verdict.validate()?;
    let last = sweeps.last().ok_or_else(|| Error::state("no sweep has been run yet"))?;
    match verdict.kind {
        VerdictKind::Success => {
            let chosen = verdict.chosen_image.expect("validated");
            match last.images.get(chosen) {
                Some(Some(_)) => Ok(Outcome::Done { chosen_image: chosen }),
                Some(None) => Err(Error::contract(format!("sweep image {chosen} failed to render"))),
                None => Err(Error::contract(format!(
                    "chosen image {chosen} out of range for a sweep of {}",
                    last.images.len()
                ))),
            }
        }
        VerdictKind::Overfit => {
            let preferred = strategy_for(verdict.intention.expect("validated"));
            let alternate = match preferred {
                ForgettingStrategy::EncoderAttn => ForgettingStrategy::DecoderAttn,
                _ => ForgettingStrategy::EncoderAttn,
            };
            let used = |s: &ForgettingStrategy| sweeps.iter().any(|sw| &sw.strategy == s);
            if !used(&preferred) {
                Ok(Outcome::Next(NextAction::subtraction(preferred)))
            } else if !used(&alternate) {
                Ok(Outcome::Next(NextAction::subtraction(alternate)))
            } else {
                let mut action =
                    NextAction::subtraction(ForgettingStrategy::Custom(manual_fallback_rule()));
                action.needs_manual = true;
                Ok(Outcome::Next(action))
            }
        }
        VerdictKind::Underfit => Ok(Outcome::Next(NextAction::projection(last.strategy.clone()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::tests::fake_sweep;

    fn sweep_with(strategy: ForgettingStrategy) -> SweepResult {
        SweepResult { strategy, ..fake_sweep(8) }
    }

    #[test]
    fn transitions_follow_the_diagram() {
        use StateValue::*;
        let all = [Created, Finetuning, AwaitingVerdict, Done, Failed];
        let legal: Vec<_> = all
            .iter()
            .flat_map(|&a| all.iter().map(move |&b| (a, b)))
            .filter(|&(a, b)| a.can_transition_to(b))
            .collect();
        assert_eq!(
            legal,
            vec![
                (Created, Finetuning),
                (Created, Failed),
                (Finetuning, AwaitingVerdict),
                (Finetuning, Failed),
                (AwaitingVerdict, AwaitingVerdict),
                (AwaitingVerdict, Done),
                (AwaitingVerdict, Failed),
            ]
        );
    }

    #[test]
    fn overfit_picks_by_intention_then_escalates() {
        let none = [sweep_with(ForgettingStrategy::None)];
        let next = |sweeps: &[SweepResult], i| match decide(sweeps, &Verdict::overfit(i)).unwrap() {
            Outcome::Next(a) => a,
            other => panic!("{other:?}"),
        };
        assert_eq!(next(&none, EditIntention::Structure).strategy, ForgettingStrategy::EncoderAttn);
        assert_eq!(next(&none, EditIntention::Appearance).strategy, ForgettingStrategy::DecoderAttn);

        let enc = [sweep_with(ForgettingStrategy::None), sweep_with(ForgettingStrategy::EncoderAttn)];
        assert_eq!(next(&enc, EditIntention::Structure).strategy, ForgettingStrategy::DecoderAttn);

        let both = [
            sweep_with(ForgettingStrategy::EncoderAttn),
            sweep_with(ForgettingStrategy::DecoderAttn),
        ];
        let manual = next(&both, EditIntention::Appearance);
        assert!(manual.needs_manual);
        assert_eq!(manual.mode, EditMode::Subtraction);
        assert_eq!(manual.strategy.name(), "custom");
    }

    #[test]
    fn underfit_switches_to_projection_keeping_strategy() {
        let sweeps = [sweep_with(ForgettingStrategy::DecoderAttn)];
        let Outcome::Next(a) = decide(&sweeps, &Verdict::underfit()).unwrap() else { panic!() };
        assert_eq!(a.mode, EditMode::Projection);
        assert_eq!(a.strategy, ForgettingStrategy::DecoderAttn);
        assert_eq!(a.alpha, Some(1.0));
        assert_eq!(a.grid, GammaGrid::default_grid());
    }

    #[test]
    fn success_checks_the_chosen_slot() {
        let mut sweep = fake_sweep(8);
        assert_eq!(decide(&[sweep.clone()], &Verdict::success(3)).unwrap(), Outcome::Done { chosen_image: 3 });
        assert!(decide(&[sweep.clone()], &Verdict::success(8)).unwrap_err().is_contract());
        sweep.images[2] = None;
        assert!(decide(&[sweep], &Verdict::success(2)).unwrap_err().is_contract());
    }

    #[test]
    fn bad_verdicts() {
        let sweeps = [fake_sweep(8)];
        let v = Verdict { kind: VerdictKind::Overfit, chosen_image: None, intention: None };
        assert!(decide(&sweeps, &v).unwrap_err().is_contract());
        assert!(matches!(decide(&[], &Verdict::underfit()), Err(Error::State(_))));
    }

    #[test]
    fn action_wire_format() {
        let v = serde_json::to_value(NextAction::subtraction(ForgettingStrategy::EncoderAttn)).unwrap();
        assert_eq!(v["mode"], "Subtraction");
        assert_eq!(v["strategy"], "encoderattn");
        assert_eq!(v["grid"].as_array().unwrap().len(), 8);
        assert_eq!(v["needs_manual"], false);
        assert!(v.get("alpha").is_none());
    }
}
