//! Public-API round trips: scenario files, a short training run on disk,
//! checkpoint reload, evaluation and replay.

use commdef::scenario::{load_scenario, to_config_text};
use commdef::trainer::{
    evaluate_policy, parse_action_log, replay, run_baseline, Baseline, RunDirectory, ACTIONS_FILE, CHECKPOINT_FILE,
    MATRIX_FILE, TRAINING_FILE,
};
use commdef::{build_scenario, train, Checkpoint, ModelConfig, ScenarioKind, TrainConfig, TrainingLog};

fn tiny_config(total_steps: u64) -> TrainConfig {
    TrainConfig {
        total_steps,
        episodes_per_update: 4,
        log_interval: 2,
        eval_interval: 4,
        eval_episodes: 3,
        model: ModelConfig {
            d_model: 16,
            heads: 2,
            encoder_blocks: 1,
            decoder_blocks: 1,
            ff_hidden: 16,
        },
        ..TrainConfig::default()
    }
}

#[test]
fn builtin_scenarios_survive_a_file_round_trip() {
    for kind in ScenarioKind::ALL {
        let s = build_scenario(kind);
        s.validate().unwrap();
        let back = load_scenario(&to_config_text(&s)).unwrap();
        assert_eq!(back.fingerprint(), s.fingerprint(), "{kind:?}");
        assert_eq!(to_config_text(&back), to_config_text(&s), "{kind:?}");
    }
}

#[test]
fn baselines_are_seed_deterministic() {
    let s = build_scenario(ScenarioKind::Homogeneous);
    let a = run_baseline(&s, Baseline::Random, 5, 3).unwrap();
    let b = run_baseline(&s, Baseline::Random, 5, 3).unwrap();
    assert_eq!(a, b);
    let c = run_baseline(&s, Baseline::Random, 5, 4).unwrap();
    assert_ne!(a.totals, c.totals);
}

#[test]
fn run_directory_artifacts_reload_and_replay() {
    let s = build_scenario(ScenarioKind::Micro);
    let dir = tempfile::tempdir().unwrap();
    let mut logged = 0;
    let summary = {
        let mut sink = RunDirectory::create(dir.path()).unwrap().on_log(|_| logged += 1);
        train(&s, &tiny_config(160), &mut sink).unwrap()
    };
    assert_eq!(summary.episodes, 40);
    assert_eq!(summary.updates, 10);
    assert_eq!(logged, 5);

    let read = |name: &str| std::fs::read_to_string(dir.path().join(name)).unwrap();
    let log = TrainingLog::from_csv(&read(TRAINING_FILE)).unwrap();
    assert_eq!(log.rows.len(), summary.updates);
    assert_eq!(log.rows.last().unwrap().steps, 160);
    assert_eq!(read(MATRIX_FILE).lines().count(), 40);

    let actions = parse_action_log(&read(ACTIONS_FILE)).unwrap();
    assert_eq!(actions.episodes.len(), 5);
    assert_eq!(replay(&actions).unwrap().divergence, None);

    let ck = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck.steps, 160);
    assert_eq!(ck.scenario().unwrap().fingerprint(), s.fingerprint());
    let a = evaluate_policy(&s, &ck, 4, 2).unwrap();
    assert_eq!(a, evaluate_policy(&s, &ck, 4, 2).unwrap());
    // the final eval row used the same checkpoint state
    assert_eq!(summary.final_eval.totals.len(), 3);
    assert_eq!(replay(&parse_action_log(&a.action_log).unwrap()).unwrap().steps, 4 * s.horizon);
}
