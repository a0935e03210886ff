use forgedit::backend::{Backend, ParameterRole, ToyBackend};
use forgedit::finetune::{finetune, reconstruction_error, FinetuneConfig};
use forgedit::forgetting::diff_checkpoints;
use forgedit::synthetic::gradient_scene;
use forgedit::types::Prompt;
use forgedit::Error;

fn prompt() -> Prompt {
    Prompt::user("a smooth color gradient").unwrap()
}

#[test]
fn default_run_converges_memorizes_and_is_deterministic() {
    let backend = ToyBackend::standard();
    let image = gradient_scene(16);
    let config = FinetuneConfig::default();
    assert_eq!((config.steps, config.seed), (200, 7));

    let mut seen = 0;
    let a = finetune(&backend, &image, &prompt(), &config, |_| seen += 1).unwrap();
    assert_eq!(seen, 200);
    assert_eq!(a.loss_curve.len(), 200);
    let (first, last) = (a.mean_loss(0..10), a.mean_loss(190..200));
    assert!(last <= 0.5 * first, "first10 {first} last10 {last}");

    let e_src = backend.encode_text(&prompt()).unwrap();
    let before = reconstruction_error(&backend, backend.pretrained(), &e_src, &image, 99).unwrap();
    let after = reconstruction_error(&backend, &a.finetuned_params, &a.optimized_embedding, &image, 99).unwrap();
    assert!(after < before, "reconstruction {before} -> {after}");
    assert!(after >= 0.0);

    let b = finetune(&backend, &image, &prompt(), &config, |_| {}).unwrap();
    assert!(a.finetuned_params.bits_eq(&b.finetuned_params));
    assert_eq!(a.optimized_embedding, b.optimized_embedding);

    // Every role cell was trained.
    let diff = diff_checkpoints(backend.pretrained(), &a.finetuned_params).unwrap();
    for role in ParameterRole::ALL {
        let moved = diff
            .iter()
            .filter(|(name, _)| a.finetuned_params.role(name) == Some(role))
            .any(|(_, &d)| d > 0.0);
        assert!(moved, "no parameter moved in {role}");
    }
}

#[test]
fn one_step_updates_embedding_and_unet_together() {
    let backend = ToyBackend::standard();
    let pretrained = backend.pretrained().clone();
    let image = gradient_scene(16);
    let config = FinetuneConfig { steps: 1, ..Default::default() };
    let r = finetune(&backend, &image, &prompt(), &config, |_| {}).unwrap();
    assert_ne!(r.optimized_embedding, backend.encode_text(&prompt()).unwrap());
    assert!(diff_checkpoints(&pretrained, &r.finetuned_params).unwrap().values().any(|&d| d > 0.0));
    assert!(backend.pretrained().bits_eq(&pretrained), "pretrained snapshot was mutated");
}

#[test]
fn preconditions() {
    let backend = ToyBackend::standard();
    let image = gradient_scene(16);
    let zero = FinetuneConfig { steps: 0, ..Default::default() };
    assert!(matches!(finetune(&backend, &image, &prompt(), &zero, |_| {}), Err(Error::Contract(_))));
    let bad_lr = FinetuneConfig { unet_lr: -1.0, ..Default::default() };
    assert!(finetune(&backend, &image, &prompt(), &bad_lr, |_| {}).is_err());
    let wrong_size = gradient_scene(8);
    assert!(finetune(&backend, &wrong_size, &prompt(), &FinetuneConfig::default(), |_| {}).is_err());
}

#[test]
fn huge_learning_rate_aborts_with_partial_curve() {
    let backend = ToyBackend::standard();
    let config = FinetuneConfig { unet_lr: 1e30, clip_norm: 1e30, steps: 50, ..Default::default() };
    match finetune(&backend, &gradient_scene(16), &prompt(), &config, |_| {}) {
        Err(Error::FinetuneAborted { step, partial_curve, .. }) => {
            assert_eq!(partial_curve.len(), step);
            assert!(step >= 1);
        }
        other => panic!("expected an aborted finetune, got {:?}", other.map(|r| r.loss_curve.len())),
    }
}

#[test]
fn wall_clock_budget_stops_early() {
    let backend = ToyBackend::standard();
    let config = FinetuneConfig { steps: 10_000, wall_clock_budget: Some(0.05), ..Default::default() };
    let r = finetune(&backend, &gradient_scene(16), &prompt(), &config, |_| {}).unwrap();
    assert!(r.budget_exceeded);
    assert!(r.loss_curve.len() < 10_000);
}
