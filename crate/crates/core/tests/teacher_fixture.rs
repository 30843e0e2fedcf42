use rlab::corpus::{CorpusConfig, CorpusSplits};
use rlab::eval::perplexity;
use rlab::transformer::{train_teacher, ModelConfig, TeacherTrainConfig, Transformer};

/// The desk model learns the procedural corpus well inside 2000 steps.
#[test]
fn desk_teacher_beats_sixty_percent_of_initial_perplexity_in_2000_steps() {
    let splits = CorpusSplits::generate(&CorpusConfig {
        seed: 1,
        ..Default::default()
    })
    .unwrap();
    let holdout = &splits.holdout[..200];
    let tcfg = TeacherTrainConfig {
        steps: 2000,
        seed: 1,
        ..Default::default()
    };
    let cfg = ModelConfig::desk();
    let initial = perplexity(&Transformer::init(cfg.clone(), tcfg.seed).unwrap(), holdout).unwrap();
    let trained = Transformer::new(
        cfg.clone(),
        train_teacher(&cfg, &splits.train, &tcfg).unwrap(),
    )
    .unwrap();
    let after = perplexity(&trained, holdout).unwrap();
    assert!(
        after < 0.6 * initial,
        "perplexity {after:.3} from {initial:.3}"
    );
}
