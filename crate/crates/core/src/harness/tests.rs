use std::path::Path;

use super::*;
use crate::aggregation::{AggregatorKind, Direction};
use crate::data::parse_text;

const TOY_TRAIN: &str = include_str!("../../tests/fixtures/toy_train.tsv");
const TOY_DEV: &str = include_str!("../../tests/fixtures/toy_dev.tsv");
const TOY_TEST: &str = include_str!("../../tests/fixtures/toy_test.tsv");

fn small_config() -> TrainConfig {
    TrainConfig {
        embedding_size: 12,
        lstm_hidden: 10,
        mlp_hidden: 10,
        capsule_dim: 6,
        capsules: 2,
        iterations: 2,
        learning_rate: 0.01,
        lr_decay_steps: 100,
        batch_size: 16,
        batch_low: 4,
        bucket_window: 64,
        dropout: 0.2,
        max_epochs: 3,
        ..TrainConfig::sst2()
    }
}

fn corpus(cfg: &TrainConfig, train_lines: usize) -> Corpus {
    let opts = parse_options(cfg);
    let mut labels = LabelMap::new();
    let train_text: String = TOY_TRAIN
        .lines()
        .take(train_lines)
        .map(|l| format!("{l}\n"))
        .collect();
    let train = parse_text(&train_text, Path::new("train"), &opts, &mut labels).unwrap();
    labels.freeze();
    let dev = parse_text(TOY_DEV, Path::new("dev"), &opts, &mut labels).unwrap();
    let test = parse_text(TOY_TEST, Path::new("test"), &opts, &mut labels).unwrap();
    Corpus::from_parsed(cfg, train, dev, Some(test), labels).unwrap()
}

#[test]
fn seeds_are_spread() {
    let mut seen: Vec<u64> = (0..4)
        .flat_map(|a| (0..50).map(move |b| derive_seed(1, a, b)))
        .collect();
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen.len(), 200);
    assert_ne!(derive_seed(1, 0, 0), derive_seed(2, 0, 0));
}

#[test]
fn patience_stops_seven_epochs_after_last_improvement() {
    let mut stop = EarlyStop::new(StopMetric::Accuracy, 7);
    let accs = [0.5, 0.6, 0.7, 0.7, 0.65, 0.69, 0.7, 0.6, 0.5, 0.7, 0.99];
    let mut epochs = 0;
    for &a in &accs {
        if stop.should_stop() {
            break;
        }
        stop.update(a, 1.0 - a);
        epochs += 1;
    }
    assert_eq!(epochs, 10);
    assert_eq!(stop.best_accuracy, 0.7);

    let mut by_loss = EarlyStop::new(StopMetric::Loss, 1);
    assert!(by_loss.update(0.5, 0.9));
    assert!(by_loss.update(0.4, 0.8));
    assert!(!by_loss.update(0.9, 0.8));
    assert!(by_loss.should_stop());
}

fn constant_model(classes: usize, favored: usize) -> Model {
    let cfg = small_config();
    let spec = ModelSpec::from_config(&cfg, 40, classes);
    let mut m = Model::new(spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    m.store.value_mut(m.head.w_out).data_mut().fill(0.0);
    let b = m.store.value_mut(m.head.b_out);
    b.data_mut().fill(0.0);
    b.data_mut()[favored] = 1.0;
    m
}

fn examples(labels: &[usize]) -> Vec<Example> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &label)| Example {
            label,
            sentences: vec![vec![2 + (i % 30) as u32, 3, 4]],
        })
        .collect()
}

#[test]
fn constant_predictor_scores_half_on_balanced_data() {
    let m = constant_model(2, 1);
    let data = examples(&[0, 1, 0, 1, 1, 0]);
    let metrics = evaluate(&m, &data, Execution::Sequential).unwrap();
    assert_eq!(metrics.accuracy, 0.5);
    assert_eq!(metrics.confusion, vec![vec![0, 3], vec![0, 3]]);
    assert_eq!(metrics.count, 6);
}

#[test]
fn accuracy_matches_hand_count() {
    let cfg = small_config();
    let spec = ModelSpec::from_config(&cfg, 40, 3);
    let m = Model::new(spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let data = examples(&[0, 1, 2, 0, 1, 2, 0, 1, 2, 0]);
    let mut errors = 0;
    let mut loss = 0.0;
    for ex in &data {
        let (p, ..) = m.predict(&ex.sentences[0], &[(0, 3)]).unwrap();
        let mut best = 0;
        for k in 1..p.len() {
            if p[k] > p[best] {
                best = k;
            }
        }
        errors += usize::from(best != ex.label);
        loss -= p[ex.label].ln();
    }
    for exec in [Execution::Sequential, Execution::Parallel] {
        let metrics = evaluate(&m, &data, exec).unwrap();
        assert_eq!(metrics.accuracy, (10 - errors) as f64 / 10.0);
        assert!((metrics.loss - loss / 10.0).abs() < 1e-12);
    }
}

#[test]
fn evaluate_rejects_foreign_labels() {
    let m = constant_model(2, 0);
    let data = examples(&[0, 1, 2]);
    assert!(matches!(
        evaluate(&m, &data, Execution::Sequential),
        Err(Error::Contract(_))
    ));
}

#[test]
fn training_is_deterministic_across_execution_modes() {
    let cfg = small_config();
    let c = corpus(&cfg, 120);
    let run = |exec| {
        let (model, _) = init_model(&cfg, &c).unwrap();
        train(&cfg, model, &c.train, &c.dev, exec, &mut |_| {}).unwrap()
    };
    let a = run(Execution::Parallel);
    let b = run(Execution::Parallel);
    let s = run(Execution::Sequential);
    assert_eq!(log_tsv(&a.log), log_tsv(&b.log));
    assert_eq!(log_tsv(&a.log), log_tsv(&s.log));
    assert_eq!(a.best, b.best);
    assert_eq!(a.best, s.best);
    assert_eq!(a.log.len(), 3);
}

#[test]
fn best_checkpoint_matches_log_maximum() {
    let cfg = TrainConfig {
        max_epochs: 6,
        patience: 2,
        ..small_config()
    };
    let c = corpus(&cfg, 160);
    let (model, _) = init_model(&cfg, &c).unwrap();
    let mut seen = Vec::new();
    let out = train(
        &cfg,
        model,
        &c.train,
        &c.dev,
        Execution::Parallel,
        &mut |r| seen.push(r.clone()),
    )
    .unwrap();
    assert_eq!(seen, out.log);
    let max = out
        .log
        .iter()
        .map(|r| r.dev_accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best_dev_accuracy, max);
    let first_max = out
        .log
        .iter()
        .find(|r| r.dev_accuracy == max)
        .unwrap()
        .epoch;
    assert_eq!(out.best_epoch, first_max);
    let again = evaluate(&out.best, &c.dev, Execution::Sequential).unwrap();
    assert_eq!(again.accuracy, max);
    // window doubles and batch halves after each stagnant epoch
    for w in out.log.windows(2) {
        if w[0].improved {
            assert_eq!(w[1].batch_size, w[0].batch_size);
        } else {
            assert_eq!(w[1].batch_size, (w[0].batch_size / 2).max(cfg.batch_low));
            assert_eq!(w[1].window_size, (w[0].window_size * 2).min(c.train.len()));
        }
    }
}

#[test]
fn full_batch_loss_mostly_decreases() {
    let cfg = TrainConfig {
        dropout: 0.0,
        learning_rate: 0.003,
        aggregator: AggregatorKind::Routing(Direction::Standard),
        ..small_config()
    };
    let c = corpus(&cfg, 24);
    let (mut model, _) = init_model(&cfg, &c).unwrap();
    let idx: Vec<usize> = (0..c.train.len()).collect();
    let batch = Batch::new(&c.train, &idx);
    let sizes: Vec<usize> = model.store.iter().map(|p| p.value.len()).collect();
    let mut adam = AdamState::new(&sizes);
    let mut losses = Vec::new();
    for step in 0..51 {
        losses.push(
            train_step(
                &mut model,
                &mut adam,
                &batch,
                &cfg,
                step,
                Execution::Parallel,
            )
            .unwrap(),
        );
    }
    let down = losses.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(down >= 45, "{down}/50 non-increasing: {losses:?}");
}

#[test]
fn nan_weights_abort_with_step() {
    let cfg = small_config();
    let c = corpus(&cfg, 40);
    let (mut model, _) = init_model(&cfg, &c).unwrap();
    model.store.value_mut(model.head.b_out).data_mut()[0] = f64::NAN;
    let err = train(
        &cfg,
        model,
        &c.train,
        &c.dev,
        Execution::Sequential,
        &mut |_| {},
    )
    .unwrap_err();
    assert!(matches!(err, Error::Diverged { step: 0, .. }), "{err}");
    assert!(err.to_string().contains("step 0"));
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let cfg = TrainConfig {
        hierarchical: true,
        sentence_aggregator: Some(AggregatorKind::Attention),
        max_epochs: 1,
        ..small_config()
    };
    let c = corpus(&cfg, 60);
    let run = train_and_evaluate(&cfg, &c, Execution::Parallel, &mut |_| {}).unwrap();
    let ckpt = Checkpoint {
        config: cfg.clone(),
        labels: c.labels.clone(),
        vocab: c.vocab.clone(),
        model: run.outcome.best.clone(),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes(), ckpt.to_bytes());
    let dev = evaluate(&back.model, &c.dev, Execution::Sequential).unwrap();
    assert_eq!(dev.accuracy.to_bits(), run.dev.accuracy.to_bits());
    assert_eq!(dev.loss.to_bits(), run.dev.loss.to_bits());

    let bytes = ckpt.to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(Checkpoint::from_bytes(b"nonsense").is_err());
}

#[test]
fn sweep_rows_sorted_and_match_direct_runs() {
    let cfg = TrainConfig {
        max_epochs: 1,
        ..small_config()
    };
    let c = corpus(&cfg, 48);
    let rows = iteration_sweep(&cfg, &c, &[2, 1], &[2, 1], &[3], Execution::Parallel).unwrap();
    let keys: Vec<(usize, usize)> = rows.iter().map(|r| (r.iterations, r.capsules)).collect();
    assert_eq!(keys, vec![(1, 1), (1, 2), (2, 1), (2, 2)]);
    let direct_cfg = TrainConfig {
        iterations: 2,
        capsules: 1,
        seed: 3,
        ..cfg.clone()
    };
    let direct = train_and_evaluate(&direct_cfg, &c, Execution::Sequential, &mut |_| {}).unwrap();
    assert_eq!(rows[2].dev_accuracy, direct.dev.accuracy);
    assert_eq!(rows[2].test_accuracy, direct.test.unwrap().accuracy);
    let tsv = sweep_tsv(&rows);
    assert!(tsv.starts_with("T\tM\tseed\tdev_acc\ttest_acc\n"));
    assert_eq!(tsv.lines().count(), 5);

    let pooled = TrainConfig {
        aggregator: AggregatorKind::Max,
        ..cfg
    };
    assert!(matches!(
        iteration_sweep(&pooled, &c, &[1], &[1], &[1], Execution::Sequential),
        Err(Error::Config(_))
    ));
    assert!(iteration_sweep(&direct_cfg, &c, &[], &[1], &[1], Execution::Sequential).is_err());
}
