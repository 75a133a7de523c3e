//! `capsagg` command-line tool.
//!
//! Exit status is 0 on success, 1 for configuration problems (bad flags or
//! config files, missing inputs) and 2 for failures while running.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use capsagg::aggregation::AggregatorKind;
use capsagg::autodiff::set_corrupt_tanh_backward;
use capsagg::config::TrainConfig;
use capsagg::data::{parse_dataset, tokenize};
use capsagg::exec::Execution;
use capsagg::harness::{
    evaluate, iteration_sweep, log_tsv, parse_options, sweep_tsv, train_and_evaluate,
    write_artifact, Checkpoint, Corpus, Metrics, SweepRow, LOG_HEADER,
};
use capsagg::model::{gradcheck_model, GradCheckSetup};
use capsagg::viz::{render_html, routing_tsv, visualize, Normalization};
use capsagg::Error;

const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "capsagg",
    version,
    about = "BiLSTM text classifiers with pooling, attention or dynamic-routing aggregation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and keep the best dev checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a labelled file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `label<TAB>text` file.
        #[arg(long)]
        data: PathBuf,
        /// Also write metrics and a manifest here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        sequential: bool,
    },
    /// Train over a grid of routing iterations and capsule counts.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Routing iterations to try.
        #[arg(long = "t", value_delimiter = ',', default_value = "1,2,3,4,5")]
        t_values: Vec<usize>,
        /// Capsule counts to try.
        #[arg(long = "m", value_delimiter = ',', default_value = "1,2,3,4")]
        m_values: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        seeds: Vec<u64>,
    },
    /// Compare backpropagated gradients with central differences for every aggregator.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Write coupling-coefficient heatmaps for a routing checkpoint.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        /// One input per line; a leading `label<TAB>` is ignored.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Show this routing iteration (1-based) instead of the last.
        #[arg(long)]
        iteration: Option<usize>,
        /// Display scaling: per capsule row or over the whole section.
        #[arg(long, default_value = "row")]
        normalize: String,
    },
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// `key = value` config file, applied over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from a named preset (sst2, sst1, yelp13, yelp14, imdb).
    #[arg(long)]
    preset: Option<String>,
    /// Override any config key, e.g. `--set l2=1e-5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// max | avg | attn | dr-standard | dr-reversed
    #[arg(long)]
    aggregator: Option<String>,
    /// Document-level aggregator for hierarchical models.
    #[arg(long)]
    sentence_aggregator: Option<String>,
    #[arg(long)]
    hierarchical: bool,
    #[arg(long)]
    capsules: Option<usize>,
    #[arg(long)]
    capsule_dim: Option<usize>,
    #[arg(long)]
    capsule_iters: Option<usize>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Pretrained vectors, `token v1 ... vd` per line.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Run on one thread.
    #[arg(long)]
    sequential: bool,
}

impl ConfigArgs {
    /// Preset or defaults, then the config file, then flags.
    fn resolve(&self) -> capsagg::Result<TrainConfig> {
        let mut cfg = match &self.preset {
            Some(p) => TrainConfig::preset(p)?,
            None => TrainConfig::default(),
        };
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            cfg.apply_text(&text, path)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(a) = &self.aggregator {
            cfg.aggregator = a.parse()?;
        }
        if let Some(a) = &self.sentence_aggregator {
            cfg.sentence_aggregator = Some(a.parse()?);
        }
        if self.hierarchical {
            cfg.hierarchical = true;
        }
        if let Some(m) = self.capsules {
            cfg.capsules = m;
        }
        if let Some(d) = self.capsule_dim {
            cfg.capsule_dim = d;
        }
        if let Some(t) = self.capsule_iters {
            cfg.iterations = t;
        }
        for (slot, flag) in [
            (&mut cfg.train_path, &self.train),
            (&mut cfg.dev_path, &self.dev),
            (&mut cfg.test_path, &self.test),
            (&mut cfg.embeddings_path, &self.embeddings),
        ] {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
        if let Some(e) = self.max_epochs {
            cfg.max_epochs = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn exec(&self) -> Execution {
        exec(self.sequential)
    }
}

fn exec(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

/// A failed command with its exit status.
struct Failure {
    code: u8,
    error: Error,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = match error {
            Error::Config(_) => 1,
            _ => 2,
        };
        Failure { code, error }
    }
}

fn config_failure(error: Error) -> Failure {
    Failure { code: 1, error }
}

type CmdResult = Result<(), Failure>;

/// Re-runnable record of a command: a comment header, then the resolved
/// config. No timestamps, so identical runs give identical manifests.
fn manifest(command: &str, cfg: &TrainConfig, artifacts: &[&str]) -> String {
    let mut out = format!(
        "# capsagg {} {command}\n# seed {}\n",
        env!("CARGO_PKG_VERSION"),
        cfg.seed
    );
    for a in artifacts {
        out.push_str(&format!("# artifact {a}\n"));
    }
    out.push_str(&cfg.to_text());
    out
}

fn metrics_tsv(rows: &[(&str, &Metrics)]) -> String {
    let mut out = String::from("split\taccuracy\tloss\tcount\n");
    for (name, m) in rows {
        out.push_str(&format!(
            "{name}\t{}\t{}\t{}\n",
            m.accuracy, m.loss, m.count
        ));
    }
    out
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    if !path.is_file() {
        return Err(config_failure(Error::Config(format!(
            "checkpoint {} not found",
            path.display()
        ))));
    }
    Ok(Checkpoint::load(path)?)
}

fn class_names(labels: &capsagg::data::LabelMap) -> Vec<String> {
    labels.raw().iter().map(i64::to_string).collect()
}

fn cmd_train(args: &ConfigArgs, out: &Path) -> CmdResult {
    let cfg = args.resolve().map_err(config_failure)?;
    let corpus = Corpus::load(&cfg)?;
    eprintln!(
        "train {} / dev {} / test {} examples, {} classes, vocabulary {}",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.as_ref().map_or(0, Vec::len),
        corpus.labels.classes(),
        corpus.vocab.len()
    );
    eprintln!("{LOG_HEADER}");
    let run = train_and_evaluate(&cfg, &corpus, args.exec(), &mut |r| {
        eprintln!("{}", r.tsv_row())
    })?;
    if let Some(rate) = run.match_rate {
        eprintln!(
            "pretrained vectors cover {:.1}% of the vocabulary",
            rate * 100.0
        );
    }
    let ckpt = Checkpoint {
        config: cfg.clone(),
        labels: corpus.labels.clone(),
        vocab: corpus.vocab.clone(),
        model: run.outcome.best.clone(),
    };
    let mut metrics = vec![("dev", &run.dev)];
    if let Some(t) = &run.test {
        metrics.push(("test", t));
    }
    let artifacts = [
        "train_log.tsv",
        "model.ckpt",
        "label_map.tsv",
        "metrics.tsv",
    ];
    write_artifact(out, "train_log.tsv", log_tsv(&run.outcome.log).as_bytes())?;
    write_artifact(out, "model.ckpt", &ckpt.to_bytes())?;
    write_artifact(out, "label_map.tsv", corpus.labels.to_tsv().as_bytes())?;
    write_artifact(out, "metrics.tsv", metrics_tsv(&metrics).as_bytes())?;
    write_artifact(
        out,
        "manifest.conf",
        manifest("train", &cfg, &artifacts).as_bytes(),
    )?;
    println!(
        "best epoch {} dev_acc {:.4}{}",
        run.outcome.best_epoch,
        run.dev.accuracy,
        run.test
            .as_ref()
            .map(|t| format!(" test_acc {:.4}", t.accuracy))
            .unwrap_or_default()
    );
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path, out: Option<&Path>, sequential: bool) -> CmdResult {
    if !data.is_file() {
        return Err(config_failure(Error::Config(format!(
            "dataset {} not found",
            data.display()
        ))));
    }
    let ckpt = load_checkpoint(checkpoint)?;
    let mut labels = ckpt.labels.clone();
    let parsed = parse_dataset(data, &parse_options(&ckpt.config), &mut labels)?;
    let examples: Vec<_> = parsed
        .examples
        .iter()
        .map(|e| ckpt.vocab.encode_example(e))
        .collect();
    let m = evaluate(&ckpt.model, &examples, exec(sequential))?;
    println!(
        "accuracy {:.4} loss {:.6} count {}",
        m.accuracy, m.loss, m.count
    );
    if let Some(dir) = out {
        write_artifact(dir, "metrics.tsv", metrics_tsv(&[("eval", &m)]).as_bytes())?;
        let mut text = manifest("eval", &ckpt.config, &["metrics.tsv"]);
        text.insert_str(
            0,
            &format!(
                "# checkpoint {}\n# data {}\n",
                checkpoint.display(),
                data.display()
            ),
        );
        write_artifact(dir, "manifest.conf", text.as_bytes())?;
    }
    Ok(())
}

fn cmd_sweep(args: &ConfigArgs, out: &Path, t: &[usize], m: &[usize], seeds: &[u64]) -> CmdResult {
    let cfg = args.resolve().map_err(config_failure)?;
    if t.contains(&0) {
        return Err(config_failure(Error::Config(
            "iterations must be ≥ 1".into(),
        )));
    }
    if m.contains(&0) {
        return Err(config_failure(Error::Config("capsules must be ≥ 1".into())));
    }
    let corpus = Corpus::load(&cfg)?;
    let rows = iteration_sweep(&cfg, &corpus, t, m, seeds, args.exec())?;
    let table = sweep_tsv(&rows);
    print!("{table}");
    if let Some(peak) = peak_iterations(&rows) {
        println!("# highest mean dev accuracy at T={peak}");
    }
    write_artifact(out, "sweep.tsv", table.as_bytes())?;
    let mut text = manifest("sweep", &cfg, &["sweep.tsv"]);
    let list = |v: Vec<String>| v.join(",");
    text.insert_str(
        0,
        &format!(
            "# grid t={} m={} seeds={}\n",
            list(t.iter().map(ToString::to_string).collect()),
            list(m.iter().map(ToString::to_string).collect()),
            list(seeds.iter().map(ToString::to_string).collect())
        ),
    );
    write_artifact(out, "manifest.conf", text.as_bytes())?;
    Ok(())
}

/// `T` with the best dev accuracy averaged over capsule counts and seeds.
fn peak_iterations(rows: &[SweepRow]) -> Option<usize> {
    let mut ts: Vec<usize> = rows.iter().map(|r| r.iterations).collect();
    ts.dedup();
    let mean = |t: usize| {
        let accs: Vec<f64> = rows
            .iter()
            .filter(|r| r.iterations == t)
            .map(|r| r.dev_accuracy)
            .collect();
        accs.iter().sum::<f64>() / accs.len() as f64
    };
    ts.into_iter()
        .map(|t| (t, mean(t)))
        .fold(None, |best: Option<(usize, f64)>, (t, a)| match best {
            Some((_, b)) if b >= a => best,
            _ => Some((t, a)),
        })
        .map(|(t, _)| t)
}

fn cmd_gradcheck(seed: u64, corrupt: bool) -> CmdResult {
    set_corrupt_tanh_backward(corrupt);
    let mut ok = true;
    for kind in AggregatorKind::ALL {
        let setup = GradCheckSetup {
            seed,
            ..GradCheckSetup::default()
        };
        let report = gradcheck_model(kind, false, setup)?;
        let pass = report.max_rel_error < GRADCHECK_TOL;
        ok &= pass;
        println!(
            "{:<12} max_rel_error {:.3e}  checked {:>5}  {}",
            kind.to_string(),
            report.max_rel_error,
            report.checked,
            if pass { "ok" } else { "FAIL" }
        );
    }
    if ok {
        Ok(())
    } else {
        Err(Failure {
            code: 2,
            error: Error::Contract(format!("gradient check above {GRADCHECK_TOL:e}")),
        })
    }
}

fn cmd_visualize(
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    iteration: Option<usize>,
    normalize: &str,
) -> CmdResult {
    let norm: Normalization = normalize.parse().map_err(config_failure)?;
    let text = std::fs::read_to_string(input).map_err(|e| {
        config_failure(Error::Config(format!(
            "cannot read {}: {e}",
            input.display()
        )))
    })?;
    let ckpt = load_checkpoint(checkpoint)?;
    if !ckpt.config.aggregator.is_routing() && !ckpt.config.document_aggregator().is_routing() {
        return Err(config_failure(Error::Config(
            "no routing state to visualize".into(),
        )));
    }
    let opts = parse_options(&ckpt.config);
    let mut items = Vec::new();
    for line in text.lines() {
        let body = line.split_once('\t').map_or(line, |(_, t)| t);
        let mut sentences = tokenize(body, &opts);
        if sentences.is_empty() {
            continue;
        }
        if !ckpt.config.hierarchical {
            sentences = vec![sentences.concat()];
        }
        items.push(visualize(&ckpt.model, &ckpt.vocab, &sentences)?);
    }
    if items.is_empty() {
        return Err(config_failure(Error::Config(format!(
            "{} has no text",
            input.display()
        ))));
    }
    let tsv = routing_tsv(&items, iteration)?;
    let html = render_html(&items, &class_names(&ckpt.labels), iteration, norm)?;
    write_artifact(out, "routing.tsv", tsv.as_bytes())?;
    write_artifact(out, "routing.html", html.as_bytes())?;
    let mut text = manifest("visualize", &ckpt.config, &["routing.tsv", "routing.html"]);
    text.insert_str(
        0,
        &format!(
            "# checkpoint {}\n# input {}\n# iteration {}\n# normalize {normalize}\n",
            checkpoint.display(),
            input.display(),
            iteration.map_or("last".to_string(), |t| t.to_string())
        ),
    );
    write_artifact(out, "manifest.conf", text.as_bytes())?;
    println!(
        "{} inputs, {} sections",
        items.len(),
        items.iter().map(|v| v.sections.len()).sum::<usize>()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Train { config, out } => cmd_train(config, out),
        Command::Eval {
            checkpoint,
            data,
            out,
            sequential,
        } => cmd_eval(checkpoint, data, out.as_deref(), *sequential),
        Command::Sweep {
            config,
            out,
            t_values,
            m_values,
            seeds,
        } => cmd_sweep(config, out, t_values, m_values, seeds),
        Command::Gradcheck {
            seed,
            corrupt_backward,
        } => cmd_gradcheck(*seed, *corrupt_backward),
        Command::Visualize {
            checkpoint,
            input,
            out,
            iteration,
            normalize,
        } => cmd_visualize(checkpoint, input, out, *iteration, normalize),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.error);
            ExitCode::from(f.code)
        }
    }
}
