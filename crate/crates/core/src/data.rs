//! Vocabulary, pretrained embeddings, dataset files, padded batches and the
//! sliding-bucket sampler.

use std::collections::HashMap;
use std::path::Path;
use std::sync::mpsc::sync_channel;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::layers::{PAD_ID, UNK_ID};
use crate::params::normal;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Keeps tokens seen at least `min_freq` times, most frequent first,
    /// ties broken lexicographically. Ids 0 and 1 are padding and unknown.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Result<Self> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut total = 0usize;
        for tok in corpus {
            *counts.entry(tok).or_default() += 1;
            total += 1;
        }
        if total == 0 {
            return Err(Error::config(
                "cannot build a vocabulary from an empty corpus",
            ));
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_freq.max(1) && t != PAD_TOKEN && t != UNK_TOKEN)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_tokens(
            [PAD_TOKEN, UNK_TOKEN]
                .into_iter()
                .chain(kept.into_iter().map(|(t, _)| t))
                .map(String::from)
                .collect(),
        )
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[0] != PAD_TOKEN || tokens[1] != UNK_TOKEN {
            return Err(Error::contract(
                "vocabulary must start with the pad and unknown tokens",
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::contract(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.get(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn encode_example(&self, ex: &TextExample) -> Example {
        Example {
            label: ex.label,
            sentences: ex
                .sentences
                .iter()
                .map(|s| s.iter().map(|t| self.id(t)).collect())
                .collect(),
        }
    }
}

/// Embedding table for `vocab` seeded from a whitespace text file of
/// `token v1 … v_d` lines. Returns the table and the fraction of
/// non-reserved vocabulary tokens found in the file.
pub fn load_pretrained(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, f64)> {
    let text = std::fs::read_to_string(path)?;
    pretrained_from_text(&text, path, vocab, dim, rng)
}

pub fn pretrained_from_text(
    text: &str,
    origin: &Path,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, f64)> {
    let mut table = normal(&[vocab.len(), dim], 0.1, rng);
    let mut seen = vec![false; vocab.len()];
    for (n, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let parse_err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: n + 1,
            message,
        };
        let values = fields
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| parse_err(format!("`{f}` is not a number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != dim {
            return Err(parse_err(format!(
                "expected {dim} values for `{token}`, found {}",
                values.len()
            )));
        }
        if let Some(id) = vocab.get(token) {
            let id = id as usize;
            if id > UNK_ID as usize && !seen[id] {
                seen[id] = true;
                table.data_mut()[id * dim..(id + 1) * dim].copy_from_slice(&values);
            }
        }
    }
    table.data_mut()[..dim].fill(0.0);
    let candidates = vocab.len() - 2;
    let matched = seen.iter().filter(|&&s| s).count();
    let rate = if candidates == 0 {
        0.0
    } else {
        matched as f64 / candidates as f64
    };
    Ok((table, rate))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Sentence,
    Document,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParseOptions {
    pub format: Format,
    pub separator: String,
    pub lowercase: bool,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions {
            format: Format::Sentence,
            separator: "<sssss>".into(),
            lowercase: true,
        }
    }
}

/// Raw integer labels in the order they were first seen; class ids are
/// positions in that order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelMap {
    raw: Vec<i64>,
    frozen: bool,
}

impl LabelMap {
    pub fn new() -> Self {
        LabelMap::default()
    }

    pub fn from_raw(raw: Vec<i64>) -> Self {
        LabelMap { raw, frozen: true }
    }

    /// Stops new labels from being added.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn classes(&self) -> usize {
        self.raw.len()
    }

    pub fn raw(&self) -> &[i64] {
        &self.raw
    }

    pub fn class_of(&self, raw: i64) -> Option<usize> {
        self.raw.iter().position(|&r| r == raw)
    }

    fn intern(&mut self, raw: i64) -> Option<usize> {
        match self.class_of(raw) {
            Some(c) => Some(c),
            None if !self.frozen => {
                self.raw.push(raw);
                Some(self.raw.len() - 1)
            }
            None => None,
        }
    }

    /// `raw<TAB>id` rows under a header.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("raw\tid\n");
        for (c, r) in self.raw.iter().enumerate() {
            out.push_str(&format!("{r}\t{c}\n"));
        }
        out
    }
}

/// One tokenized example before vocabulary lookup.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextExample {
    pub label: usize,
    pub sentences: Vec<Vec<String>>,
}

impl TextExample {
    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.sentences.iter().flatten().map(String::as_str)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParsedDataset {
    pub examples: Vec<TextExample>,
    /// Lines dropped because they had no tokens.
    pub skipped: usize,
}

/// Parses a `label<TAB>text` file. New labels are added to `labels`
/// unless it is frozen, in which case they are an error.
pub fn parse_dataset(
    path: &Path,
    opts: &ParseOptions,
    labels: &mut LabelMap,
) -> Result<ParsedDataset> {
    let text = std::fs::read_to_string(path)?;
    parse_text(&text, path, opts, labels)
}

pub fn parse_text(
    text: &str,
    origin: &Path,
    opts: &ParseOptions,
    labels: &mut LabelMap,
) -> Result<ParsedDataset> {
    let mut out = ParsedDataset::default();
    for (n, line) in text.lines().enumerate() {
        let err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: n + 1,
            message,
        };
        if line.trim().is_empty() {
            continue;
        }
        let (label, body) = line
            .split_once('\t')
            .ok_or_else(|| err("missing tab between label and text".into()))?;
        let raw: i64 = label
            .trim()
            .parse()
            .map_err(|_| err(format!("label `{label}` is not an integer")))?;
        let class = labels
            .intern(raw)
            .ok_or_else(|| err(format!("label {raw} does not occur in the training data")))?;
        let sentences = tokenize(body, opts);
        if sentences.is_empty() {
            out.skipped += 1;
            continue;
        }
        out.examples.push(TextExample {
            label: class,
            sentences,
        });
    }
    Ok(out)
}

/// Splits raw text into whitespace tokens, grouped into sentences at each
/// separator token in document format. Empty sentences are dropped.
pub fn tokenize(text: &str, opts: &ParseOptions) -> Vec<Vec<String>> {
    let text = if opts.lowercase {
        text.to_lowercase()
    } else {
        text.to_string()
    };
    let mut sentences = vec![Vec::new()];
    for tok in text.split_whitespace() {
        if opts.format == Format::Document && tok == opts.separator {
            sentences.push(Vec::new());
        } else {
            sentences
                .last_mut()
                .expect("non-empty")
                .push(tok.to_string());
        }
    }
    sentences.retain(|s| !s.is_empty());
    sentences
}

/// A labelled example as token ids, one list per sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub label: usize,
    pub sentences: Vec<Vec<u32>>,
}

impl Example {
    pub fn len(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(start, len)` of each sentence in the flattened token list.
    pub fn spans(&self) -> Vec<(usize, usize)> {
        let mut start = 0;
        self.sentences
            .iter()
            .map(|s| {
                let span = (start, s.len());
                start += s.len();
                span
            })
            .collect()
    }
}

/// Examples padded to a common length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Dataset positions of the rows.
    pub indices: Vec<usize>,
    /// `B × L_max` ids, padded with the padding id.
    pub ids: Vec<Vec<u32>>,
    pub lengths: Vec<usize>,
    /// Sentence `(start, len)` spans per row.
    pub spans: Vec<Vec<(usize, usize)>>,
    pub mask: Vec<Vec<bool>>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(data: &[Example], indices: &[usize]) -> Self {
        let width = indices.iter().map(|&i| data[i].len()).max().unwrap_or(0);
        let mut batch = Batch {
            indices: indices.to_vec(),
            ids: Vec::with_capacity(indices.len()),
            lengths: Vec::with_capacity(indices.len()),
            spans: Vec::with_capacity(indices.len()),
            mask: Vec::with_capacity(indices.len()),
            labels: Vec::with_capacity(indices.len()),
        };
        for &i in indices {
            let ex = &data[i];
            let mut row: Vec<u32> = ex.sentences.concat();
            let len = row.len();
            row.resize(width, PAD_ID);
            batch.mask.push((0..width).map(|k| k < len).collect());
            batch.ids.push(row);
            batch.lengths.push(len);
            batch.spans.push(ex.spans());
            batch.labels.push(ex.label);
        }
        batch
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Recovers each row's sentences without padding.
    pub fn unpad(&self) -> Vec<Vec<Vec<u32>>> {
        self.ids
            .iter()
            .zip(&self.spans)
            .map(|(row, spans)| spans.iter().map(|&(s, l)| row[s..s + l].to_vec()).collect())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplerConfig {
    pub batch_size: usize,
    pub batch_low: usize,
    pub window: usize,
    pub seed: u64,
}

/// Length-sorted data cut into consecutive windows ("buckets"). Each epoch
/// the windows are visited in order; inside a window examples are shuffled
/// and cut into batches. A no-improvement report doubles the window and
/// halves the batch size down to its low bound.
#[derive(Clone, Debug)]
pub struct BucketSampler {
    order: Vec<usize>,
    window: usize,
    batch_size: usize,
    batch_low: usize,
    rng: ChaCha8Rng,
}

impl BucketSampler {
    pub fn new(lengths: &[usize], cfg: SamplerConfig) -> Result<Self> {
        if cfg.batch_size < 1 {
            return Err(Error::config("batch_size must be ≥ 1"));
        }
        if cfg.window < 1 {
            return Err(Error::config("bucket_window must be ≥ 1"));
        }
        if lengths.is_empty() {
            return Err(Error::contract(
                "cannot sample batches from an empty dataset",
            ));
        }
        let mut order: Vec<usize> = (0..lengths.len()).collect();
        order.sort_by_key(|&i| lengths[i]);
        Ok(BucketSampler {
            window: cfg.window.min(order.len()),
            order,
            batch_size: cfg.batch_size,
            batch_low: cfg.batch_low.clamp(1, cfg.batch_size),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Dataset indices of every batch in the next epoch.
    pub fn epoch(&mut self) -> Vec<Vec<usize>> {
        let mut batches = Vec::with_capacity(self.order.len().div_ceil(self.batch_size));
        for bucket in self.order.chunks(self.window) {
            let mut bucket = bucket.to_vec();
            bucket.shuffle(&mut self.rng);
            batches.extend(bucket.chunks(self.batch_size).map(<[usize]>::to_vec));
        }
        batches
    }

    /// Feeds back whether the last epoch improved on the dev set.
    pub fn report(&mut self, improved: bool) {
        if !improved {
            self.window = (self.window * 2).min(self.order.len());
            self.batch_size = (self.batch_size / 2).max(self.batch_low);
        }
    }
}

/// Runs `produce` on a helper thread, handing its items to `consume`
/// through a queue of at most `capacity` items. Stops early when
/// `consume` fails.
pub fn prefetch<T, P, C>(capacity: usize, produce: P, mut consume: C) -> Result<()>
where
    T: Send,
    P: FnOnce(&mut dyn FnMut(T) -> bool) + Send,
    C: FnMut(T) -> Result<()>,
{
    let (tx, rx) = sync_channel::<T>(capacity.max(1));
    std::thread::scope(move |s| {
        s.spawn(move || {
            let mut send = |item: T| tx.send(item).is_ok();
            produce(&mut send);
        });
        // rx is owned here so an early return disconnects the producer
        for item in rx {
            consume(item)?;
        }
        Ok(())
    })
}
