//! Training with early stopping, evaluation, checkpoints and the
//! iteration sweep.

mod checkpoint;
mod sweep;

pub use checkpoint::Checkpoint;
pub use sweep::{iteration_sweep, sweep_tsv, SweepRow, SWEEP_HEADER};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{StopMetric, TrainConfig};
use crate::data::{
    load_pretrained, parse_dataset, prefetch, Batch, BucketSampler, Example, Format, LabelMap,
    ParseOptions, ParsedDataset, SamplerConfig, Vocabulary,
};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::layers::Mode;
use crate::model::{accumulate, Model, ModelSpec};
use crate::objective::{clip_global_norm, AdamState, LOG_FLOOR};

/// splitmix64 over `(seed, a, b)`.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    for _ in 0..2 {
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

const SEED_MODEL: u64 = 1;
const SEED_SAMPLER: u64 = 2;
const SEED_EMBEDDING: u64 = 3;
const SEED_DROPOUT: u64 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    /// Mean `−log p(label)`.
    pub loss: f64,
    pub count: usize,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |best, i| if v[i] > v[best] { i } else { best })
}

/// Inference-mode metrics of `model` on `data`.
pub fn evaluate(model: &Model, data: &[Example], exec: Execution) -> Result<Metrics> {
    let classes = model.spec.classes;
    if data.is_empty() {
        return Err(Error::contract("cannot evaluate an empty dataset"));
    }
    if let Some(ex) = data.iter().find(|e| e.label >= classes) {
        return Err(Error::contract(format!(
            "label {} outside the model's {classes} classes",
            ex.label
        )));
    }
    let probs = exec.map(data, |_, ex| {
        model
            .predict(&ex.sentences.concat(), &ex.spans())
            .map(|r| r.0)
    });
    let mut confusion = vec![vec![0; classes]; classes];
    let mut loss = 0.0;
    let mut correct = 0;
    for (ex, p) in data.iter().zip(probs) {
        let p = p?;
        let pred = argmax(&p);
        confusion[ex.label][pred] += 1;
        correct += usize::from(pred == ex.label);
        loss -= p[ex.label].max(LOG_FLOOR).ln();
    }
    Ok(Metrics {
        accuracy: correct as f64 / data.len() as f64,
        loss: loss / data.len() as f64,
        count: data.len(),
        confusion,
    })
}

pub const LOG_HEADER: &str = "epoch\ttrain_loss\tdev_acc\tlr\tbatch_size\twindow_size";

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean objective over the epoch's batches.
    pub train_loss: f64,
    pub dev_accuracy: f64,
    pub dev_loss: f64,
    /// Rate used by the epoch's last update.
    pub lr: f64,
    pub batch_size: usize,
    pub window_size: usize,
    pub improved: bool,
}

impl EpochRecord {
    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.epoch,
            self.train_loss,
            self.dev_accuracy,
            self.lr,
            self.batch_size,
            self.window_size
        )
    }
}

pub fn log_tsv(log: &[EpochRecord]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in log {
        out.push_str(&r.tsv_row());
        out.push('\n');
    }
    out
}

/// Strict-improvement tracking of the dev metric.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStop {
    pub metric: StopMetric,
    pub patience: usize,
    pub best_accuracy: f64,
    pub best_loss: f64,
    pub since_improvement: usize,
}

impl EarlyStop {
    pub fn new(metric: StopMetric, patience: usize) -> Self {
        EarlyStop {
            metric,
            patience,
            best_accuracy: f64::NEG_INFINITY,
            best_loss: f64::INFINITY,
            since_improvement: 0,
        }
    }

    /// Records one dev evaluation; true when it strictly beats the best so
    /// far (ties keep the earlier epoch).
    pub fn update(&mut self, accuracy: f64, loss: f64) -> bool {
        let improved = match self.metric {
            StopMetric::Accuracy => accuracy > self.best_accuracy,
            StopMetric::Loss => loss < self.best_loss,
        };
        if improved {
            self.best_accuracy = accuracy;
            self.best_loss = loss;
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
        }
        improved
    }

    pub fn should_stop(&self) -> bool {
        self.since_improvement >= self.patience
    }
}

/// Mutable training progress.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub epoch: usize,
    pub step: usize,
    pub stop: EarlyStop,
    pub sampler: BucketSampler,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the best dev epoch.
    pub best: Model,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_accuracy: f64,
    pub steps: usize,
}

/// One optimizer update on `batch`; returns the batch objective.
fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    batch: &Batch,
    cfg: &TrainConfig,
    step: usize,
    exec: Execution,
) -> Result<f64> {
    let rows: Vec<usize> = (0..batch.len()).collect();
    let frozen: &Model = model;
    let results = exec.map(&rows, |_, &k| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            SEED_DROPOUT,
            ((step as u64) << 20) | k as u64,
        ));
        let mut mode = if cfg.dropout > 0.0 {
            Mode::Train {
                dropout: cfg.dropout,
                rng: &mut rng,
            }
        } else {
            Mode::Eval
        };
        frozen.example_gradient(&batch.ids[k], &batch.spans[k], batch.labels[k], &mut mode)
    });

    let mut grads = model.zero_grads();
    let mut loss = 0.0;
    for r in results {
        let g = r?;
        loss += g.loss;
        accumulate(&mut grads, &g);
    }
    let inv = 1.0 / batch.len() as f64;
    loss *= inv;
    for (g, p) in grads.iter_mut().zip(model.store.iter()) {
        g.iter_mut().for_each(|x| *x *= inv);
        if cfg.l2 > 0.0 && (p.regularize || (cfg.l2_embedding && p.sparse)) {
            loss += cfg.l2 * p.value.sum_squares();
            g.iter_mut()
                .zip(p.value.data())
                .for_each(|(gi, w)| *gi += 2.0 * cfg.l2 * w);
        }
    }
    if !loss.is_finite() || grads.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Diverged { step, value: loss });
    }
    if let Some(c) = cfg.clip_norm {
        clip_global_norm(&mut grads, c);
    }
    let lr = cfg.schedule().lr_at(step);
    let mut views: Vec<&mut [f64]> = model.store.iter_mut().map(|p| p.value.data_mut()).collect();
    adam.step(&mut views, &grads, lr)?;
    Ok(loss)
}

/// Trains until dev stagnates for `patience` epochs or `max_epochs` pass.
/// `on_epoch` sees each log record as it is produced.
pub fn train(
    cfg: &TrainConfig,
    mut model: Model,
    train_set: &[Example],
    dev_set: &[Example],
    exec: Execution,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::config("training and dev sets must be non-empty"));
    }
    let classes = model.spec.classes;
    if let Some(ex) = train_set.iter().find(|e| e.label >= classes) {
        return Err(Error::contract(format!(
            "label {} outside {classes} classes",
            ex.label
        )));
    }
    let lengths: Vec<usize> = train_set.iter().map(Example::len).collect();
    let mut state = TrainState {
        epoch: 0,
        step: 0,
        stop: EarlyStop::new(cfg.stop_metric, cfg.patience),
        sampler: BucketSampler::new(
            &lengths,
            SamplerConfig {
                batch_size: cfg.batch_size,
                batch_low: cfg.batch_low,
                window: cfg.bucket_window,
                seed: derive_seed(cfg.seed, SEED_SAMPLER, 0),
            },
        )?,
    };
    let sizes: Vec<usize> = model.store.iter().map(|p| p.value.len()).collect();
    let mut adam = AdamState::new(&sizes);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut log = Vec::new();

    while state.epoch < cfg.max_epochs && !state.stop.should_stop() {
        state.epoch += 1;
        let (batch_size, window_size) = (state.sampler.batch_size(), state.sampler.window());
        let batches = state.sampler.epoch();
        let mut loss_sum = 0.0;
        let step = &mut state.step;
        prefetch(
            4,
            |send| {
                for idx in &batches {
                    if !send(Batch::new(train_set, idx)) {
                        return;
                    }
                }
            },
            |batch| {
                loss_sum += train_step(&mut model, &mut adam, &batch, cfg, *step, exec)?;
                *step += 1;
                Ok(())
            },
        )?;

        let dev = evaluate(&model, dev_set, exec)?;
        let improved = state.stop.update(dev.accuracy, dev.loss);
        if improved {
            best = model.clone();
            best_epoch = state.epoch;
        }
        state.sampler.report(improved);
        let record = EpochRecord {
            epoch: state.epoch,
            train_loss: loss_sum / batches.len() as f64,
            dev_accuracy: dev.accuracy,
            dev_loss: dev.loss,
            lr: cfg.schedule().lr_at(state.step.saturating_sub(1)),
            batch_size,
            window_size,
            improved,
        };
        on_epoch(&record);
        log.push(record);
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_dev_accuracy: state.stop.best_accuracy,
        log,
        steps: state.step,
    })
}

/// Datasets encoded against a vocabulary built from the training split.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub labels: LabelMap,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Option<Vec<Example>>,
    /// Lines dropped for having no tokens, over all splits.
    pub skipped: usize,
}

impl Corpus {
    /// Builds the vocabulary from `train` and encodes every split.
    /// `labels` must already hold the labels of all three splits.
    pub fn from_parsed(
        cfg: &TrainConfig,
        train: ParsedDataset,
        dev: ParsedDataset,
        test: Option<ParsedDataset>,
        labels: LabelMap,
    ) -> Result<Self> {
        let vocab =
            Vocabulary::build(train.examples.iter().flat_map(|e| e.tokens()), cfg.min_freq)?;
        let encode =
            |d: &ParsedDataset| d.examples.iter().map(|e| vocab.encode_example(e)).collect();
        Ok(Corpus {
            train: encode(&train),
            dev: encode(&dev),
            test: test.as_ref().map(encode),
            skipped: train.skipped + dev.skipped + test.as_ref().map_or(0, |t| t.skipped),
            vocab,
            labels,
        })
    }

    /// Reads the splits named in `cfg`.
    pub fn load(cfg: &TrainConfig) -> Result<Self> {
        let need = |p: &Option<std::path::PathBuf>, what: &str| -> Result<std::path::PathBuf> {
            let p = p
                .clone()
                .ok_or_else(|| Error::config(format!("missing {what} dataset path")))?;
            if !p.is_file() {
                return Err(Error::config(format!(
                    "{what} dataset {} not found",
                    p.display()
                )));
            }
            Ok(p)
        };
        let train_path = need(&cfg.train_path, "train")?;
        let dev_path = need(&cfg.dev_path, "dev")?;
        let test_path = cfg
            .test_path
            .as_ref()
            .map(|_| need(&cfg.test_path, "test"))
            .transpose()?;
        let opts = parse_options(cfg);
        let mut labels = LabelMap::new();
        let train = parse_dataset(&train_path, &opts, &mut labels)?;
        labels.freeze();
        let dev = parse_dataset(&dev_path, &opts, &mut labels)?;
        let test = test_path
            .map(|p| parse_dataset(&p, &opts, &mut labels))
            .transpose()?;
        Corpus::from_parsed(cfg, train, dev, test, labels)
    }
}

/// Files are always split on the separator; flat models simply read the
/// sentences back to back.
pub fn parse_options(cfg: &TrainConfig) -> ParseOptions {
    ParseOptions {
        format: Format::Document,
        separator: cfg.separator.clone(),
        lowercase: cfg.lowercase,
    }
}

/// Freshly initialized model for `corpus`, with pretrained rows when
/// `cfg` names an embedding file. Also returns the pretrained match rate.
pub fn init_model(cfg: &TrainConfig, corpus: &Corpus) -> Result<(Model, Option<f64>)> {
    cfg.validate()?;
    let spec = ModelSpec::from_config(cfg, corpus.vocab.len(), corpus.labels.classes());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SEED_MODEL, 0));
    match &cfg.embeddings_path {
        None => Ok((Model::new(spec, &mut rng)?, None)),
        Some(path) => {
            if !path.is_file() {
                return Err(Error::config(format!(
                    "embedding file {} not found",
                    path.display()
                )));
            }
            let mut emb_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SEED_EMBEDDING, 0));
            let (table, rate) =
                load_pretrained(path, &corpus.vocab, cfg.embedding_size, &mut emb_rng)?;
            Ok((Model::with_embeddings(spec, table, &mut rng)?, Some(rate)))
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub outcome: TrainOutcome,
    pub dev: Metrics,
    pub test: Option<Metrics>,
    pub match_rate: Option<f64>,
}

/// Initializes, trains and evaluates the best model on dev and test.
pub fn train_and_evaluate(
    cfg: &TrainConfig,
    corpus: &Corpus,
    exec: Execution,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<RunResult> {
    let (model, match_rate) = init_model(cfg, corpus)?;
    let outcome = train(cfg, model, &corpus.train, &corpus.dev, exec, on_epoch)?;
    let dev = evaluate(&outcome.best, &corpus.dev, exec)?;
    let test = corpus
        .test
        .as_ref()
        .map(|t| evaluate(&outcome.best, t, exec))
        .transpose()?;
    Ok(RunResult {
        outcome,
        dev,
        test,
        match_rate,
    })
}

/// Writes `contents` to `dir/name`, creating `dir`.
pub fn write_artifact(dir: &Path, name: &str, contents: &[u8]) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, contents)?;
    Ok(path)
}

#[cfg(test)]
mod tests;
