use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(name)
}

fn capsagg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capsagg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_train_args(out: &Path, extra: &[&str]) -> Vec<String> {
    let mut args: Vec<String> = vec![
        "train".into(),
        "--train".into(),
        fixture("toy_train.tsv").display().to_string(),
        "--dev".into(),
        fixture("toy_dev.tsv").display().to_string(),
        "--test".into(),
        fixture("toy_test.tsv").display().to_string(),
        "--config".into(),
        fixture("small.conf").display().to_string(),
        "--out".into(),
        out.display().to_string(),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    args
}

fn run(args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    capsagg(&refs)
}

#[test]
fn zero_iterations_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&small_train_args(dir.path(), &["--capsule-iters", "0"]));
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("iterations must be ≥ 1"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "# comment\nlstm_hidden = 8\ncapsule_width = 3\n").unwrap();
    let o = capsagg(&[
        "train",
        "--config",
        conf.to_str().unwrap(),
        "--out",
        "unused",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown key `capsule_width`"));
    assert!(stderr(&o).contains("bad.conf:3"));
}

#[test]
fn missing_dataset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = capsagg(&[
        "train",
        "--train",
        "/nonexistent/train.tsv",
        "--dev",
        fixture("toy_dev.tsv").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("not found"));
}

#[test]
fn identical_runs_write_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&small_train_args(out, &["--seed", "5"]));
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for name in [
        "manifest.conf",
        "train_log.tsv",
        "model.ckpt",
        "label_map.tsv",
        "metrics.tsv",
    ] {
        let x = std::fs::read(a.join(name)).unwrap();
        let y = std::fs::read(b.join(name)).unwrap();
        if name == "manifest.conf" {
            // the output directory is not part of the manifest
            assert!(!String::from_utf8_lossy(&x).contains(a.to_str().unwrap()));
        }
        assert_eq!(x, y, "{name} differs");
    }
    let manifest = std::fs::read_to_string(a.join("manifest.conf")).unwrap();
    assert!(manifest.contains("seed = 5"));
    assert!(manifest.contains("aggregator = dr-standard"));

    // the manifest alone reproduces the run
    let c = dir.path().join("c");
    let o = capsagg(&[
        "train",
        "--config",
        a.join("manifest.conf").to_str().unwrap(),
        "--out",
        c.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(a.join("model.ckpt")).unwrap(),
        std::fs::read(c.join("model.ckpt")).unwrap()
    );

    let log = std::fs::read_to_string(a.join("train_log.tsv")).unwrap();
    assert!(log.starts_with("epoch\ttrain_loss\tdev_acc\tlr\tbatch_size\twindow_size\n"));
    assert_eq!(
        std::fs::read_to_string(a.join("label_map.tsv")).unwrap(),
        "raw\tid\n1\t0\n0\t1\n"
    );

    let o = capsagg(&[
        "eval",
        "--checkpoint",
        a.join("model.ckpt").to_str().unwrap(),
        "--data",
        fixture("toy_test.tsv").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let metrics = std::fs::read_to_string(a.join("metrics.tsv")).unwrap();
    let test_acc = metrics
        .lines()
        .find(|l| l.starts_with("test\t"))
        .unwrap()
        .split('\t')
        .nth(1)
        .unwrap();
    let printed = String::from_utf8_lossy(&o.stdout);
    assert!(printed.starts_with(&format!("accuracy {:.4}", test_acc.parse::<f64>().unwrap())));
}

#[test]
fn gradcheck_reports_every_aggregator() {
    let o = capsagg(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 5);
    for (line, name) in lines
        .iter()
        .zip(["max", "avg", "attn", "dr-standard", "dr-reversed"])
    {
        assert!(line.starts_with(name) && line.ends_with("ok"), "{line}");
    }
}

#[test]
fn gradcheck_catches_a_broken_backward_rule() {
    let o = capsagg(&["gradcheck", "--corrupt-backward"]);
    assert_ne!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn visualize_writes_tsv_and_html() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let o = run(&small_train_args(&run_dir, &["--capsules", "3"]));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let input = dir.path().join("input.txt");
    std::fs::write(
        &input,
        "so relentlessly wholesome it made me want to swipe something .\n",
    )
    .unwrap();
    let viz = dir.path().join("viz");
    let o = capsagg(&[
        "visualize",
        "--checkpoint",
        run_dir.join("model.ckpt").to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--out",
        viz.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let tsv = std::fs::read_to_string(viz.join("routing.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 1 + 3 * 11);
    let mut per_token = [0.0f64; 11];
    for line in tsv.lines().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        per_token[f[2].parse::<usize>().unwrap()] += f[4].parse::<f64>().unwrap();
    }
    assert!(per_token.iter().all(|s| (s - 1.0).abs() < 1e-12));
    let html = std::fs::read_to_string(viz.join("routing.html")).unwrap();
    assert_eq!(html.matches("<tr>").count(), 3);
    assert_eq!(html.matches("<td ").count(), 33);
    assert!(viz.join("manifest.conf").is_file());
}

#[test]
fn visualize_rejects_pooling_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let o = run(&small_train_args(
        &run_dir,
        &["--aggregator", "max", "--max-epochs", "1"],
    ));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = capsagg(&[
        "visualize",
        "--checkpoint",
        run_dir.join("model.ckpt").to_str().unwrap(),
        "--input",
        fixture("sst2_tiny.tsv").to_str().unwrap(),
        "--out",
        dir.path().join("viz").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no routing state to visualize"));
}

#[test]
fn sweep_emits_one_row_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = small_train_args(
        dir.path(),
        &["--max-epochs", "1", "--t", "1,2", "--m", "1,2,3"],
    );
    args[0] = "sweep".into();
    let o = run(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let tsv = std::fs::read_to_string(dir.path().join("sweep.tsv")).unwrap();
    let mut lines = tsv.lines();
    assert_eq!(lines.next(), Some("T\tM\tseed\tdev_acc\ttest_acc"));
    let grid: Vec<(String, String)> = lines
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f[0].to_string(), f[1].to_string())
        })
        .collect();
    assert_eq!(grid.len(), 6);
    assert_eq!(grid[0], ("1".into(), "1".into()));
    assert_eq!(grid[5], ("2".into(), "3".into()));
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let dir = tempfile::tempdir().unwrap();
    let mut seen = 0;
    for entry in std::fs::read_dir(root.join("configs")).unwrap() {
        let path = entry.unwrap().path();
        let o = Command::new(env!("CARGO_BIN_EXE_capsagg"))
            .current_dir(&root)
            .args([
                "train",
                "--config",
                path.to_str().unwrap(),
                "--max-epochs",
                "1",
                "--out",
            ])
            .arg(dir.path().join(path.file_stem().unwrap()))
            .output()
            .unwrap();
        let err = stderr(&o);
        // either it trains or it stops at the first missing dataset
        assert!(
            o.status.code() == Some(0) || err.contains("dataset data/"),
            "{}: {err}",
            path.display()
        );
        seen += 1;
    }
    assert!(seen >= 4);
}
