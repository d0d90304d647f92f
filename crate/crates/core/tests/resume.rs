use chartrans::checkpoint;
use chartrans::config::RunConfig;
use chartrans::data::{synthetic_text8, Corpus, SplitFractions};
use chartrans::evaluator::evaluate;
use chartrans::model::ModelConfig;
use chartrans::trainer::{best_checkpoint, TrainState, Trainer};

fn small_run(total_steps: u64) -> RunConfig {
    let mut run = RunConfig::preset("desk").unwrap();
    run.model = ModelConfig {
        d_model: 32,
        d_ff: 64,
        seq_len: 16,
        dropout_attn: 0.1,
        dropout_relu: 0.1,
        ..run.model
    };
    run.train.total_steps = total_steps;
    run.train.batch_size = 4;
    run.train.eval_interval = 4;
    run.train.eval.context = 16;
    run.train.eval.stride = 8;
    run.train.eval.max_chars = Some(300);
    run
}

fn corpus() -> Corpus {
    Corpus::from_bytes("syn", synthetic_text8(30_000, 5), SplitFractions::default()).unwrap()
}

fn train(run: &RunConfig, corpus: &Corpus, state: TrainState) -> (TrainState, String) {
    let mut log = Vec::new();
    let out = Trainer::new(run.clone(), corpus).unwrap().with_metrics(&mut log).run(state).unwrap();
    let state = out.state;
    (state, String::from_utf8(log).unwrap())
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let c = corpus();
    let run = small_run(12);
    let (straight, straight_log) = train(&run, &c, TrainState::fresh(&run).unwrap());

    let mut first_log = Vec::new();
    let mid = Trainer::new(run.clone(), &c)
        .unwrap()
        .with_metrics(&mut first_log)
        .run_until(TrainState::fresh(&run).unwrap(), 5)
        .unwrap()
        .state;
    let first_log = String::from_utf8(first_log).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    checkpoint::save(&path, &run, &mid).unwrap();
    let (_, loaded) = checkpoint::load(&path).unwrap();
    assert_eq!(loaded, mid);
    let (resumed, second_log) = train(&run, &c, loaded);

    assert_eq!(resumed.model.params(), straight.model.params());
    assert_eq!(resumed.optimizer, straight.optimizer);
    assert_eq!(format!("{first_log}{second_log}"), straight_log);
}

#[test]
fn best_checkpoint_reproduces_logged_bpc() {
    let c = corpus();
    let run = small_run(12);
    let dir = tempfile::tempdir().unwrap();
    let out = Trainer::new(run.clone(), &c)
        .unwrap()
        .with_out_dir(dir.path())
        .run(TrainState::fresh(&run).unwrap())
        .unwrap();
    let logged = out.state.best_bpc.unwrap();
    let (stored_run, best) = checkpoint::load(&best_checkpoint(dir.path())).unwrap();
    assert_eq!(stored_run, run);
    assert_eq!(best.best_bpc, Some(logged));
    assert_eq!(Some(best.model.params().to_vec()), out.best_params);
    let again = evaluate(&best.model, &c, &run.train.eval).unwrap();
    assert!((again.bpc - logged).abs() < 1e-6, "{} vs {logged}", again.bpc);
}
