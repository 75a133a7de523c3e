//! Acceptance criteria, one report line each.
//!
//! `cargo test -p capsagg-core --test acceptance` prints the lines. The
//! full-size SST-2 comparison is `#[ignore]`d and needs `SST2_DIR` (see
//! `desk_scale_sst2`).

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use capsagg::aggregation::{route, AggregatorKind, Direction, RoutingState, ROUTING_TSV_HEADER};
use capsagg::autodiff::{Tape, Tensor};
use capsagg::config::TrainConfig;
use capsagg::data::{parse_text, LabelMap, Vocabulary};
use capsagg::exec::Execution;
use capsagg::harness::{
    evaluate, init_model, iteration_sweep, log_tsv, parse_options, train, train_and_evaluate,
    Checkpoint, Corpus, SWEEP_HEADER,
};
use capsagg::model::{gradcheck_model, GradCheckSetup, ModelSpec};
use capsagg::viz::{routing_tsv, visualize};

const SST2_TINY: &str = include_str!("fixtures/sst2_tiny.tsv");
const TOY_TRAIN: &str = include_str!("fixtures/toy_train.tsv");
const TOY_DEV: &str = include_str!("fixtures/toy_dev.tsv");
const TOY_TEST: &str = include_str!("fixtures/toy_test.tsv");

/// The 11-token sentence used for the coupling display.
const SENTENCE: &str = "so relentlessly wholesome it made me want to swipe something .";

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn corpus_from(cfg: &TrainConfig, train: &str, dev: &str, test: Option<&str>) -> Corpus {
    let opts = parse_options(cfg);
    let mut labels = LabelMap::new();
    let tr = parse_text(train, Path::new("train"), &opts, &mut labels).unwrap();
    labels.freeze();
    let dv = parse_text(dev, Path::new("dev"), &opts, &mut labels).unwrap();
    let ts = test.map(|t| parse_text(t, Path::new("test"), &opts, &mut labels).unwrap());
    Corpus::from_parsed(cfg, tr, dv, ts, labels).unwrap()
}

// ---------------------------------------------------------------------------
// Independent routing oracle: plain loops over Vec<f64>.

struct Case {
    h: Vec<Vec<f64>>,
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
    m: usize,
    d: usize,
}

fn random_case(rng: &mut ChaCha8Rng) -> Case {
    let l = rng.random_range(1..10);
    let n = rng.random_range(1..6);
    let m = rng.random_range(1..6);
    let d = rng.random_range(1..6);
    let mut g = |scale: f64| scale * (rng.random::<f64>() * 2.0 - 1.0);
    Case {
        h: (0..l).map(|_| (0..n).map(|_| g(1.5)).collect()).collect(),
        w: (0..n)
            .map(|_| (0..m * d).map(|_| g(1.0)).collect())
            .collect(),
        b: (0..m * d).map(|_| g(0.5)).collect(),
        m,
        d,
    }
}

fn messages(c: &Case) -> Vec<Vec<Vec<f64>>> {
    c.h.iter()
        .map(|hi| {
            (0..c.m)
                .map(|j| {
                    (0..c.d)
                        .map(|k| {
                            let col = j * c.d + k;
                            c.b[col] + hi.iter().zip(&c.w).map(|(x, wr)| x * wr[col]).sum::<f64>()
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn squash(s: &[f64]) -> Vec<f64> {
    let n2: f64 = s.iter().map(|x| x * x).sum();
    if n2 == 0.0 {
        return vec![0.0; s.len()];
    }
    s.iter().map(|x| x * n2.sqrt() / (1.0 + n2)).collect()
}

/// Closed-form T=1 output: squash of the uniformly coupled message sums.
fn closed_form_t1(c: &Case, dir: Direction) -> Vec<f64> {
    let u = messages(c);
    let weight = match dir {
        Direction::Standard => 1.0 / c.m as f64,
        Direction::Reversed => 1.0 / c.h.len() as f64,
    };
    (0..c.m)
        .flat_map(|j| {
            let s: Vec<f64> = (0..c.d)
                .map(|k| weight * u.iter().map(|ui| ui[j][k]).sum::<f64>())
                .collect();
            squash(&s)
        })
        .collect()
}

fn run_route(
    h: &[Vec<f64>],
    c: &Case,
    t: usize,
    dir: Direction,
    mask: &[bool],
) -> (Vec<f64>, RoutingState) {
    let n = c.w.len();
    let mut tape = Tape::new();
    let hv = tape.constant(Tensor::new(vec![h.len(), n], h.concat()).unwrap());
    let wv = tape.constant(Tensor::new(vec![n, c.m * c.d], c.w.concat()).unwrap());
    let bv = tape.constant(Tensor::vector(c.b.clone()));
    let (v, state) = route(&mut tape, hv, wv, bv, c.m, c.d, t, dir, mask).unwrap();
    (tape.value(v).data().to_vec(), state)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    for kind in AggregatorKind::ALL {
        let setup = GradCheckSetup {
            embedding_size: 8,
            lstm_hidden: 6,
            capsules: 3,
            capsule_dim: 5,
            iterations: 3,
            length: 7,
            ..GradCheckSetup::default()
        };
        let r = gradcheck_model(kind, false, setup).map_err(|e| e.to_string())?;
        parts.push(format!("{kind} {:.1e}", r.max_rel_error));
        check(r.max_rel_error < 1e-4, || {
            format!("{kind}: max relative error {:.3e}", r.max_rel_error)
        })?;
    }
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(120), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!("{} in {:.1?}", parts.join(", "), elapsed))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cases = 200;
    for case in 0..cases {
        let c = random_case(&mut rng);
        let t = rng.random_range(1..6);
        let l = c.h.len();
        let n = c.w.len();
        let pad = rng.random_range(0..4);
        let mut padded = c.h.clone();
        for _ in 0..pad {
            padded.push((0..n).map(|_| 20.0 * rng.random::<f64>() - 10.0).collect());
        }
        let mut mask = vec![true; l];
        mask.extend(vec![false; pad]);
        for dir in [Direction::Standard, Direction::Reversed] {
            let (v, state) = run_route(&padded, &c, t, dir, &mask);
            for (it, (cc, vv)) in state.coupling.iter().zip(&state.capsules).enumerate() {
                let sums: Vec<f64> = match dir {
                    Direction::Standard => (0..l)
                        .map(|i| (0..c.m).map(|j| cc.at2(i, j)).sum())
                        .collect(),
                    Direction::Reversed => (0..c.m)
                        .map(|j| (0..l).map(|i| cc.at2(i, j)).sum())
                        .collect(),
                };
                for s in sums {
                    check((s - 1.0).abs() < 1e-10, || {
                        format!(
                            "case {case} {dir:?} iteration {}: coupling sums to {s}",
                            it + 1
                        )
                    })?;
                }
                for j in 0..c.m {
                    let norm = vv.row(j).iter().map(|x| x * x).sum::<f64>().sqrt();
                    check((0.0..1.0).contains(&norm), || {
                        format!("case {case}: ‖v_{j}‖ = {norm}")
                    })?;
                }
            }
            let (v0, s0) = run_route(&c.h, &c, t, dir, &vec![true; l]);
            let dp = max_diff(&v, &v0);
            check(dp < 1e-10, || {
                format!("case {case} {dir:?}: padding moved V by {dp:e}")
            })?;
            let real = &state.final_coupling().data()[..l * c.m];
            let dc = max_diff(real, s0.final_coupling().data());
            check(dc < 1e-10, || {
                format!("case {case} {dir:?}: padding moved c by {dc:e}")
            })?;

            let mut order: Vec<usize> = (0..l + pad).collect();
            for i in (1..order.len()).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let ph: Vec<Vec<f64>> = order.iter().map(|&i| padded[i].clone()).collect();
            let pm: Vec<bool> = order.iter().map(|&i| mask[i]).collect();
            let (vp, _) = run_route(&ph, &c, t, dir, &pm);
            let dq = max_diff(&v, &vp);
            check(dq < 1e-10, || {
                format!("case {case} {dir:?}: permutation moved V by {dq:e}")
            })?;
        }
    }
    Ok(format!("{cases} cases × 2 directions"))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cases = 100;
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let c = random_case(&mut rng);
        for dir in [Direction::Standard, Direction::Reversed] {
            let (v, _) = run_route(&c.h, &c, 1, dir, &vec![true; c.h.len()]);
            let d = max_diff(&v, &closed_form_t1(&c, dir));
            worst = worst.max(d);
            check(d < 1e-12, || format!("case {case} {dir:?}: off by {d:e}"))?;
        }
    }
    Ok(format!("{cases} cases × 2 directions, max |Δ| {worst:.1e}"))
}

/// Capacity settings for memorizing 32 sentences: no regularization and
/// patience long enough to reach the epoch budget.
fn overfit_config() -> TrainConfig {
    TrainConfig {
        embedding_size: 32,
        lstm_hidden: 32,
        mlp_hidden: 32,
        capsules: 3,
        capsule_dim: 16,
        iterations: 3,
        l2: 0.0,
        dropout: 0.0,
        learning_rate: 0.003,
        lr_decay: 1.0,
        batch_size: 8,
        batch_low: 8,
        max_epochs: 200,
        patience: 200,
        ..TrainConfig::sst2()
    }
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let cfg = overfit_config();
    // dev = train, so the logged dev accuracy is train accuracy
    let corpus = corpus_from(&cfg, SST2_TINY, SST2_TINY, None);
    check(corpus.train.len() == 32, || {
        format!("{} examples", corpus.train.len())
    })?;
    let (model, _) = init_model(&cfg, &corpus).map_err(|e| e.to_string())?;
    let out = train(
        &cfg,
        model,
        &corpus.train,
        &corpus.dev,
        Execution::Parallel,
        &mut |_| {},
    )
    .map_err(|e| e.to_string())?;
    let first = out
        .log
        .iter()
        .find(|r| r.dev_accuracy == 1.0)
        .map(|r| r.epoch);
    let best =
        evaluate(&out.best, &corpus.train, Execution::Sequential).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    check(first.is_some() && best.accuracy == 1.0, || {
        format!(
            "best train accuracy {:.4} after {} epochs",
            best.accuracy,
            out.log.len()
        )
    })?;
    check(elapsed < Duration::from_secs(300), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "100% train accuracy at epoch {} in {:.1?}",
        first.unwrap(),
        elapsed
    ))
}

/// Desk-scale model shape, shortened to two epochs for the structural run.
fn desk_config() -> TrainConfig {
    TrainConfig {
        embedding_size: 50,
        lstm_hidden: 64,
        mlp_hidden: 64,
        capsules: 5,
        capsule_dim: 32,
        iterations: 3,
        learning_rate: 0.003,
        max_epochs: 2,
        ..TrainConfig::sst2()
    }
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let cfg = desk_config();
    let corpus = corpus_from(&cfg, TOY_TRAIN, TOY_DEV, Some(TOY_TEST));
    let rows = iteration_sweep(
        &cfg,
        &corpus,
        &[1, 2, 3, 4, 5],
        &[1, 2, 3, 4],
        &[1],
        Execution::Parallel,
    )
    .map_err(|e| e.to_string())?;
    check(rows.len() == 20, || format!("{} rows", rows.len()))?;
    let mut expected = Vec::new();
    for t in 1..=5 {
        for m in 1..=4 {
            expected.push((t, m));
        }
    }
    let got: Vec<(usize, usize)> = rows.iter().map(|r| (r.iterations, r.capsules)).collect();
    check(got == expected, || format!("grid order {got:?}"))?;
    check(
        rows.iter().all(|r| {
            (0.0..=1.0).contains(&r.dev_accuracy) && (0.0..=1.0).contains(&r.test_accuracy)
        }),
        || "accuracy outside [0, 1]".into(),
    )?;
    let table = capsagg::harness::sweep_tsv(&rows);
    check(table.lines().next() == Some(SWEEP_HEADER), || {
        "header".into()
    })?;
    let mean = |t: usize| {
        rows.iter()
            .filter(|r| r.iterations == t)
            .map(|r| r.dev_accuracy)
            .sum::<f64>()
            / 4.0
    };
    let means: Vec<String> = (1..=5).map(|t| format!("T{t} {:.3}", mean(t))).collect();
    let peak = (1..=5).fold(1, |best, t| if mean(t) > mean(best) { t } else { best });
    Ok(format!(
        "20 rows in {:.1?}; mean dev acc {} (peak T={peak}, not asserted)",
        start.elapsed(),
        means.join(" ")
    ))
}

fn criterion_7() -> Outcome {
    let tokens: Vec<String> = SENTENCE.split(' ').map(String::from).collect();
    check(tokens.len() == 11, || format!("{} tokens", tokens.len()))?;
    let in_tiny = SST2_TINY
        .lines()
        .any(|l| l.split_once('\t').map(|x| x.1) == Some(SENTENCE));
    check(in_tiny, || "sentence missing from the fixture".into())?;
    let vocab = Vocabulary::build(
        SST2_TINY
            .lines()
            .flat_map(|l| l.split('\t').nth(1).unwrap().split(' ')),
        1,
    )
    .map_err(|e| e.to_string())?;
    for dir in [Direction::Standard, Direction::Reversed] {
        let cfg = TrainConfig {
            aggregator: AggregatorKind::Routing(dir),
            ..overfit_config()
        };
        let spec = ModelSpec::from_config(&cfg, vocab.len(), 2);
        let model = capsagg::model::Model::new(spec, &mut ChaCha8Rng::seed_from_u64(7))
            .map_err(|e| e.to_string())?;
        let viz =
            visualize(&model, &vocab, std::slice::from_ref(&tokens)).map_err(|e| e.to_string())?;
        check(viz.sections.len() == 1, || "one section".into())?;
        let state = &viz.sections[0].state;
        for iteration in (1..=3).map(Some).chain([None]) {
            let tsv =
                routing_tsv(std::slice::from_ref(&viz), iteration).map_err(|e| e.to_string())?;
            let c = state.coupling_at(iteration).map_err(|e| e.to_string())?;
            check(c.shape() == [11, 3], || {
                format!("coupling shape {:?}", c.shape())
            })?;
            let mut lines = tsv.lines();
            check(lines.next() == Some(ROUTING_TSV_HEADER), || "header".into())?;
            let mut from_tsv = vec![vec![f64::NAN; 3]; 11];
            let mut count = 0;
            for line in lines {
                let f: Vec<&str> = line.split('\t').collect();
                let (j, i): (usize, usize) = (f[1].parse().unwrap(), f[2].parse().unwrap());
                check(f[3] == tokens[i], || format!("token {i} is `{}`", f[3]))?;
                let value: f64 = f[4].parse().unwrap();
                check(value.to_bits() == c.at2(i, j).to_bits(), || {
                    format!("c[{i},{j}] changed in TSV")
                })?;
                from_tsv[i][j] = value;
                count += 1;
            }
            check(count == 33, || format!("{count} TSV rows"))?;
            let sums: Vec<f64> = match dir {
                Direction::Standard => from_tsv.iter().map(|r| r.iter().sum()).collect(),
                Direction::Reversed => (0..3)
                    .map(|j| from_tsv.iter().map(|r| r[j]).sum())
                    .collect(),
            };
            check(sums.iter().all(|s| (s - 1.0).abs() < 1e-10), || {
                format!("{dir:?} sums {sums:?}")
            })?;
        }
    }
    Ok("3 capsules × 11 tokens, bit-exact TSV, stochastic in both directions".into())
}

fn criterion_8() -> Outcome {
    let cfg = TrainConfig {
        max_epochs: 3,
        seed: 13,
        ..desk_config()
    };
    let corpus = corpus_from(&cfg, TOY_TRAIN, TOY_DEV, Some(TOY_TEST));
    let run = |exec| {
        let r = train_and_evaluate(&cfg, &corpus, exec, &mut |_| {}).unwrap();
        let ckpt = Checkpoint {
            config: cfg.clone(),
            labels: corpus.labels.clone(),
            vocab: corpus.vocab.clone(),
            model: r.outcome.best,
        };
        (log_tsv(&r.outcome.log), ckpt.to_bytes())
    };
    let a = run(Execution::Parallel);
    let b = run(Execution::Parallel);
    let s = run(Execution::Sequential);
    check(a == b, || "two parallel runs differ".into())?;
    check(a == s, || "parallel and sequential runs differ".into())?;
    Ok(format!(
        "logs and {}-byte checkpoints identical (parallel ×2, sequential)",
        a.1.len()
    ))
}

/// Writes to the stderr handle directly, which test output capture does
/// not intercept, so the lines show in a plain `cargo test`.
fn say(line: &str) {
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn report(n: usize, name: &str, outcome: &Outcome) {
    match outcome {
        Ok(detail) => say(&format!("criterion {n} PASS {name}: {detail}")),
        Err(why) => say(&format!("criterion {n} FAIL {name}: {why}")),
    }
}

#[test]
fn acceptance() {
    let criteria: [(usize, &str, fn() -> Outcome); 7] = [
        (1, "gradient check", criterion_1),
        (2, "routing invariants", criterion_2),
        (3, "T=1 closed form", criterion_3),
        (4, "overfit 32 sentences", criterion_4),
        (6, "iteration sweep table", criterion_6),
        (7, "coupling visualization", criterion_7),
        (8, "determinism", criterion_8),
    ];
    let mut failed = Vec::new();
    for (n, name, run) in criteria {
        let outcome = run();
        report(n, name, &outcome);
        if n == 4 {
            say(
                "criterion 5 BLOCKED desk-scale SST-2 comparison: needs the SST-2 splits; \
                 run `desk_scale_sst2` with SST2_DIR set (--ignored)",
            );
        }
        if outcome.is_err() {
            failed.push(n);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

/// Full SST-2 comparison of routing against max and average pooling.
///
/// `SST2_DIR` must hold `train.tsv`, `dev.tsv` and `test.tsv` as
/// `label<TAB>sentence`; `SST2_EMBEDDINGS` may name a 50-d vector file.
#[test]
#[ignore = "needs SST2_DIR with the full SST-2 splits"]
fn desk_scale_sst2() {
    let dir = PathBuf::from(std::env::var("SST2_DIR").expect("SST2_DIR is not set"));
    let base = TrainConfig {
        embedding_size: 50,
        lstm_hidden: 64,
        mlp_hidden: 64,
        capsules: 5,
        capsule_dim: 32,
        iterations: 3,
        train_path: Some(dir.join("train.tsv")),
        dev_path: Some(dir.join("dev.tsv")),
        test_path: Some(dir.join("test.tsv")),
        embeddings_path: std::env::var_os("SST2_EMBEDDINGS").map(PathBuf::from),
        ..TrainConfig::sst2()
    };
    let corpus = Corpus::load(&base).unwrap();
    let sizes = (
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.as_ref().map_or(0, Vec::len),
    );
    let start = Instant::now();
    let mean_test = |kind: AggregatorKind| {
        let accs: Vec<f64> = [1, 2, 3]
            .iter()
            .map(|&seed| {
                let cfg = TrainConfig {
                    aggregator: kind,
                    seed,
                    ..base.clone()
                };
                let r =
                    train_and_evaluate(&cfg, &corpus, Execution::Parallel, &mut |_| {}).unwrap();
                r.test.unwrap().accuracy * 100.0
            })
            .collect();
        accs.iter().sum::<f64>() / 3.0
    };
    let dr = mean_test(AggregatorKind::Routing(Direction::Standard));
    let avg = mean_test(AggregatorKind::Avg);
    let max = mean_test(AggregatorKind::Max);
    let elapsed = start.elapsed();
    let outcome = if dr - avg >= 0.5 && dr >= max - 0.3 && elapsed <= Duration::from_secs(7200) {
        Ok(format!(
            "{sizes:?}: DR {dr:.2} avg {avg:.2} max {max:.2} in {elapsed:.0?}"
        ))
    } else {
        Err(format!(
            "{sizes:?}: DR {dr:.2} avg {avg:.2} max {max:.2} in {elapsed:.0?}"
        ))
    };
    report(5, "desk-scale SST-2 comparison", &outcome);
    assert!(outcome.is_ok());
}
