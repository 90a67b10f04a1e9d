use std::time::{Duration, Instant};

use shapnas::game::PopcountGame;
use shapnas::protocol::{spawn_evaluator, EvaluatorHandle, ProtocolError, SpawnOptions};
use shapnas::search::{run_search_with, Checkpoint, EvalFailure, SearchError, SearchOptions};
use shapnas::shapley::{shapley_exact, shapley_mc, ExactConfig, McConfig};
use shapnas::{
    make_game, Coalition, EvalCache, EvalError, GameSpec, InteractionGame, SearchConfig, SearchSpace, ValueFunction,
};

fn loopback(args: &[&str]) -> Vec<String> {
    std::iter::once(env!("CARGO_BIN_EXE_shapnas-loopback"))
        .chain(args.iter().copied())
        .map(String::from)
        .collect()
}

fn spawn(args: &[&str]) -> Result<EvaluatorHandle, ProtocolError> {
    spawn_evaluator(&loopback(args), &SearchSpace::nasbench201(), SpawnOptions::default())
}

fn protocol_err(e: EvalError) -> ProtocolError {
    match e {
        EvalError::Protocol(p) => p,
        other => panic!("expected a protocol error, got {other:?}"),
    }
}

#[test]
fn echo_reports_cardinality_ratio() {
    let h = spawn(&["--echo"]).unwrap();
    assert_eq!(ValueFunction::<f64>::players(&h), 30);
    let mut c = Coalition::empty(30);
    for p in [0, 7, 13, 29] {
        c.insert(p);
    }
    assert_eq!(h.evaluate_accuracy(&c).unwrap(), 4.0 / 30.0);
    assert_eq!(h.evaluate_accuracy(&Coalition::full(30)).unwrap(), 1.0);
    assert_eq!(h.meta().unwrap()["evaluator"], "shapnas-loopback");
    h.shutdown().unwrap();
}

#[test]
fn loopback_matches_in_process_game() {
    let space = SearchSpace::nasbench201();
    let spec = GameSpec::planted().with_seed(11);
    let game: InteractionGame = make_game(&space, &spec).unwrap();
    let h = spawn(&["--game", "planted:11"]).unwrap();
    let cfg = McConfig {
        permutations: 5,
        seed: 3,
        ..McConfig::default()
    };
    let local = shapley_mc(&game, Some(&EvalCache::new()), &cfg).unwrap();
    let remote = shapley_mc(&h, Some(&EvalCache::new()), &cfg).unwrap();
    assert_eq!(local, remote);
}

#[test]
fn echo_exact_estimate_equals_in_process_game() {
    let space = SearchSpace::from_json(
        r#"{"name":"s","nodes":3,"edges":[{"from":0,"to":1,"ops":["a","b","c"]},{"from":1,"to":2,"ops":["a","b","c","d"]}]}"#,
    )
    .unwrap();
    let h = spawn_evaluator(&loopback(&["--echo"]), &space, SpawnOptions::default()).unwrap();
    let local = PopcountGame::new(7);
    let exact = ExactConfig::default();
    let remote = shapley_exact::<f64, _>(&h, None, &exact).unwrap();
    assert_eq!(remote, shapley_exact::<f64, _>(&local, None, &exact).unwrap());
    for phi in remote.phi {
        assert!((phi.unwrap() - 1.0 / 7.0).abs() < 1e-15);
    }
}

#[test]
fn wrong_response_id_is_a_protocol_error() {
    let h = spawn(&["--echo", "--fault", "wrong-id"]).unwrap();
    let err = h.evaluate_accuracy(&Coalition::full(30)).unwrap_err();
    let (sent, got) = match &err {
        ProtocolError::MismatchedId {
            expected: Some(sent),
            got,
        } => (*sent, *got),
        other => panic!("{other:?}"),
    };
    assert_eq!(got, sent + 1000);
    let msg = err.to_string();
    assert!(
        msg.contains(&format!("id {got}")) && msg.contains(&format!("expected id {sent}")),
        "{msg}"
    );
    // the connection stays failed
    assert!(h.evaluate_accuracy(&Coalition::empty(30)).is_err());
}

#[test]
fn accuracy_above_one_is_rejected() {
    let h = spawn(&["--echo", "--fault", "bad-accuracy"]).unwrap();
    let err = ValueFunction::<f64>::evaluate(&h, &Coalition::full(30)).unwrap_err();
    match protocol_err(err) {
        ProtocolError::AccuracyOutOfRange { accuracy, .. } => assert_eq!(accuracy, 1.5),
        other => panic!("{other:?}"),
    }
}

#[test]
fn player_count_mismatch_fails_handshake() {
    match spawn(&["--echo", "--fault", "bad-players"]) {
        Err(ProtocolError::PlayerMismatch { expected: 30, got: 31 }) => {}
        Err(other) => panic!("{other:?}"),
        Ok(_) => panic!("handshake accepted a wrong player count"),
    }
}

#[test]
fn missing_program_is_a_spawn_error() {
    let cmd = vec!["/nonexistent/evaluator-binary".to_string()];
    let err = spawn_evaluator(&cmd, &SearchSpace::nasbench201(), SpawnOptions::default())
        .err()
        .unwrap();
    assert!(matches!(err, ProtocolError::Spawn { .. }), "{err:?}");
}

#[test]
fn crash_mid_search_reports_epoch_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("search.json");
    let space = SearchSpace::nasbench201();
    let mut h = spawn(&["--game", "planted:2", "--fault", "die-on-train:5"]).unwrap();
    let cfg = SearchConfig {
        epochs: 8,
        warmup_epochs: 2,
        permutations: 2,
        ..SearchConfig::default()
    };
    let options = SearchOptions {
        checkpoint: Some(ckpt.clone()),
        resume: None,
    };
    let err = run_search_with(&space, &mut h, &cfg, options).unwrap_err();
    match &err {
        SearchError::Evaluator {
            epoch,
            source: EvalFailure::Train(EvalError::Protocol(ProtocolError::ChildExited { tail })),
            checkpoint,
            state,
        } => {
            assert_eq!(*epoch, 4);
            assert_eq!(state.epoch, 4);
            assert_eq!(checkpoint.as_deref(), Some(ckpt.as_path()));
            assert!(tail.iter().any(|l| l.contains("injected fault")), "{tail:?}");
        }
        other => panic!("{other:?}"),
    }
    let saved: Checkpoint<f64> = Checkpoint::read(&ckpt).unwrap();
    assert_eq!(saved.state.epoch, 4);
    assert_eq!(saved.state.history.len(), 4);
}

#[test]
fn hung_train_times_out() {
    let options = SpawnOptions {
        timeout: Duration::from_secs(5),
        train_timeout: Duration::from_millis(300),
    };
    let mut h = spawn_evaluator(
        &loopback(&["--echo", "--fault", "hang-on-train"]),
        &SearchSpace::nasbench201(),
        options,
    )
    .unwrap();
    let start = Instant::now();
    let err = h.request_train(1).unwrap_err();
    assert!(matches!(err, ProtocolError::Timeout { what: "train", .. }), "{err:?}");
    assert!(start.elapsed() < Duration::from_secs(5));
}

#[test]
fn training_moves_generation_and_values() {
    let space = SearchSpace::nasbench201();
    let mut local: InteractionGame = make_game(&space, &GameSpec::annealed().with_seed(4)).unwrap();
    let mut h = spawn(&["--game", "annealed:4"]).unwrap();
    let c = Coalition::full(30).without(3).without(17);
    assert_eq!(ValueFunction::<f64>::generation(&h), 0);
    h.request_train(0).unwrap();
    assert_eq!(ValueFunction::<f64>::generation(&h), 0);
    assert_eq!(h.evaluate_accuracy(&c).unwrap(), local.value(&c));

    let before = h.evaluate_accuracy(&c).unwrap();
    h.request_train(10).unwrap();
    local.train(10).unwrap();
    assert_eq!(ValueFunction::<f64>::generation(&h), 1);
    let after = h.evaluate_accuracy(&c).unwrap();
    assert_ne!(before, after);
    assert_eq!(after, local.value(&c));
}

#[test]
fn stale_cache_entries_are_not_served_after_training() {
    let mut h = spawn(&["--game", "annealed:9"]).unwrap();
    let cache = EvalCache::new();
    let c = Coalition::full(30).without(0);
    let v0: f64 = shapnas::cached_evaluate(&h, &cache, &c).unwrap();
    h.request_train(25).unwrap();
    let v1: f64 = shapnas::cached_evaluate(&h, &cache, &c).unwrap();
    assert_ne!(v0, v1);
    assert_eq!(cache.misses(), 2);
}

#[test]
fn windowed_evaluator_serves_parallel_scans() {
    let space = SearchSpace::nasbench201();
    let game: InteractionGame = make_game(&space, &GameSpec::planted().with_seed(5)).unwrap();
    let h = spawn(&["--game", "planted:5", "--window", "4"]).unwrap();
    assert_eq!(h.window(), 4);
    let cfg = McConfig {
        permutations: 8,
        workers: 4,
        seed: 1,
        ..McConfig::default()
    };
    let remote = shapley_mc(&h, Some(&EvalCache::new()), &cfg).unwrap();
    let local = shapley_mc(&game, Some(&EvalCache::new()), &McConfig { workers: 1, ..cfg }).unwrap();
    assert_eq!(local, remote);
}
