//! The full classifier: embeddings, BiLSTM, aggregation and MLP head.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{
    hierarchical_encode, Aggregator, AggregatorKind, AggregatorShape, RoutingState,
};
use crate::autodiff::{
    finite_diff_check, GradCheckConfig, GradCheckReport, Gradients, Tape, Tensor, Var,
};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::layers::{BiLstm, Embedding, MlpHead, Mode, PAD_ID};
use crate::objective::LOG_FLOOR;
use crate::params::{normal, Bound, ParamStore};

/// Architecture settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub vocab_size: usize,
    pub embedding_size: usize,
    pub lstm_hidden: usize,
    pub mlp_hidden: usize,
    pub classes: usize,
    pub aggregator: AggregatorKind,
    /// Used over sentence encodings when `hierarchical` is set.
    pub sentence_aggregator: AggregatorKind,
    pub hierarchical: bool,
    pub shape: AggregatorShape,
}

impl ModelSpec {
    pub fn from_config(cfg: &TrainConfig, vocab_size: usize, classes: usize) -> Self {
        ModelSpec {
            vocab_size,
            embedding_size: cfg.embedding_size,
            lstm_hidden: cfg.lstm_hidden,
            mlp_hidden: cfg.mlp_hidden,
            classes,
            aggregator: cfg.aggregator,
            sentence_aggregator: cfg.document_aggregator(),
            hierarchical: cfg.hierarchical,
            shape: cfg.aggregator_shape(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub embedding: Embedding,
    pub encoder: BiLstm,
    pub word_aggregator: Aggregator,
    pub sentence_aggregator: Option<Aggregator>,
    pub head: MlpHead,
}

/// Class probabilities, word-level routing states, sentence-level state.
pub type Prediction = (Vec<f64>, Vec<Option<RoutingState>>, Option<RoutingState>);

/// Output of one forward pass.
#[derive(Debug)]
pub struct Forward {
    /// `1 × C` class probabilities.
    pub probs: Var,
    /// Word-level routing state, one per encoded sequence.
    pub word_states: Vec<Option<RoutingState>>,
    pub sentence_state: Option<RoutingState>,
}

/// Gradient of one parameter for one example.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamGrad {
    Zero,
    Dense(Vec<f64>),
    Rows(BTreeMap<usize, Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExampleGrad {
    /// `−log p(label)` for this example.
    pub loss: f64,
    pub grads: Vec<ParamGrad>,
}

impl Model {
    /// Fresh model with a random embedding table.
    pub fn new(spec: ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let embedding = Embedding::new(&mut store, spec.vocab_size, spec.embedding_size, rng);
        Self::assemble(spec, store, embedding, rng)
    }

    /// Fresh model whose embedding table starts from `table`.
    pub fn with_embeddings(spec: ModelSpec, table: Tensor, rng: &mut impl Rng) -> Result<Self> {
        if table.shape() != [spec.vocab_size, spec.embedding_size] {
            return Err(Error::dim(
                "embedding table",
                table.shape(),
                &[spec.vocab_size, spec.embedding_size],
            ));
        }
        let mut store = ParamStore::new();
        let embedding = Embedding::from_table(&mut store, table);
        Self::assemble(spec, store, embedding, rng)
    }

    fn assemble(
        spec: ModelSpec,
        mut store: ParamStore,
        embedding: Embedding,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if spec.classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        let encoder = BiLstm::new(&mut store, spec.embedding_size, spec.lstm_hidden, rng);
        let n = encoder.output_dim();
        let word_aggregator =
            Aggregator::new(spec.aggregator, &mut store, "word_agg", n, spec.shape, rng)?;
        let word_dim = word_aggregator.output_dim(n);
        let sentence_aggregator = if spec.hierarchical {
            Some(Aggregator::new(
                spec.sentence_aggregator,
                &mut store,
                "sentence_agg",
                word_dim,
                spec.shape,
                rng,
            )?)
        } else {
            None
        };
        let enc_dim = sentence_aggregator
            .as_ref()
            .map_or(word_dim, |a| a.output_dim(word_dim));
        let head = MlpHead::new(&mut store, enc_dim, spec.mlp_hidden, spec.classes, rng);
        Ok(Model {
            spec,
            store,
            embedding,
            encoder,
            word_aggregator,
            sentence_aggregator,
            head,
        })
    }

    fn encode_sequence(
        &self,
        tape: &mut Tape<'_>,
        p: &Bound,
        ids: &[u32],
        mode: &mut Mode<'_>,
    ) -> Result<(Var, Vec<bool>)> {
        let (x, mask) = self.embedding.embed(tape, p, ids)?;
        let x = mode.dropout(tape, x)?;
        Ok((self.encoder.encode(tape, p, x, &mask)?, mask))
    }

    /// Class probabilities for one example. `ids` may carry trailing
    /// padding; `spans` gives the sentences for hierarchical models.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        p: &Bound,
        ids: &[u32],
        spans: &[(usize, usize)],
        mode: &mut Mode<'_>,
    ) -> Result<Forward> {
        match &self.sentence_aggregator {
            None => {
                let (h, mask) = self.encode_sequence(tape, p, ids, mode)?;
                let (e, state) = self.word_aggregator.aggregate(tape, p, h, &mask)?;
                Ok(Forward {
                    probs: self.head.classify(tape, p, e, mode)?,
                    word_states: vec![state],
                    sentence_state: None,
                })
            }
            Some(sentence_agg) => {
                let mut sentences = Vec::with_capacity(spans.len());
                for &(start, len) in spans {
                    let s = ids.get(start..start + len).ok_or_else(|| {
                        Error::contract(format!(
                            "sentence span {start}+{len} outside {} ids",
                            ids.len()
                        ))
                    })?;
                    if len == 0 || s.contains(&PAD_ID) {
                        return Err(Error::contract("sentences must be non-empty and unpadded"));
                    }
                    sentences.push(self.encode_sequence(tape, p, s, mode)?);
                }
                let enc =
                    hierarchical_encode(tape, p, &sentences, &self.word_aggregator, sentence_agg)?;
                Ok(Forward {
                    probs: self.head.classify(tape, p, enc.encoding, mode)?,
                    word_states: enc.word_states,
                    sentence_state: enc.sentence_state,
                })
            }
        }
    }

    /// Inference-mode probabilities and routing states.
    pub fn predict(&self, ids: &[u32], spans: &[(usize, usize)]) -> Result<Prediction> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let f = self.forward(&mut tape, &p, ids, spans, &mut Mode::Eval)?;
        Ok((
            tape.value(f.probs).data().to_vec(),
            f.word_states,
            f.sentence_state,
        ))
    }

    /// Loss and parameter gradients for one labelled example.
    pub fn example_gradient(
        &self,
        ids: &[u32],
        spans: &[(usize, usize)],
        label: usize,
        mode: &mut Mode<'_>,
    ) -> Result<ExampleGrad> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let f = self.forward(&mut tape, &p, ids, spans, mode)?;
        let loss = tape.nll(f.probs, &[label], LOG_FLOOR)?;
        let grads = tape.backward(loss)?;
        Ok(ExampleGrad {
            loss: tape.value(loss).item(),
            grads: self.collect(&p, &grads),
        })
    }

    fn collect(&self, p: &Bound, grads: &Gradients) -> Vec<ParamGrad> {
        self.store
            .iter()
            .zip(&p.0)
            .map(|(param, &v)| match (grads.wrt(v), grads.rows_wrt(v)) {
                (None, None) => ParamGrad::Zero,
                (None, Some(rows)) => ParamGrad::Rows(rows.clone()),
                _ => ParamGrad::Dense(grads.dense_wrt(v, param.value.shape())),
            })
            .collect()
    }

    /// Zeroed dense buffers shaped like every parameter.
    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.store
            .iter()
            .map(|p| vec![0.0; p.value.len()])
            .collect()
    }
}

/// Adds `g` into dense accumulators.
pub fn accumulate(acc: &mut [Vec<f64>], g: &ExampleGrad) {
    for (buf, pg) in acc.iter_mut().zip(&g.grads) {
        match pg {
            ParamGrad::Zero => {}
            ParamGrad::Dense(d) => buf.iter_mut().zip(d).for_each(|(a, b)| *a += b),
            ParamGrad::Rows(rows) => {
                for (&r, row) in rows {
                    let w = row.len();
                    buf[r * w..(r + 1) * w]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(a, b)| *a += b);
                }
            }
        }
    }
}

/// Gradient check of a tiny randomly initialized full model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckSetup {
    pub embedding_size: usize,
    pub lstm_hidden: usize,
    pub capsules: usize,
    pub capsule_dim: usize,
    pub iterations: usize,
    pub length: usize,
    pub vocab_size: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for GradCheckSetup {
    fn default() -> Self {
        GradCheckSetup {
            embedding_size: 8,
            lstm_hidden: 6,
            capsules: 3,
            capsule_dim: 5,
            iterations: 3,
            length: 7,
            vocab_size: 16,
            classes: 3,
            seed: 7,
        }
    }
}

/// Compares every parameter gradient of the loss on one synthetic
/// example against central differences.
pub fn gradcheck_model(
    kind: AggregatorKind,
    hierarchical: bool,
    setup: GradCheckSetup,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    let spec = ModelSpec {
        vocab_size: setup.vocab_size,
        embedding_size: setup.embedding_size,
        lstm_hidden: setup.lstm_hidden,
        mlp_hidden: setup.lstm_hidden,
        classes: setup.classes,
        aggregator: kind,
        sentence_aggregator: kind,
        hierarchical,
        shape: AggregatorShape {
            capsules: setup.capsules,
            capsule_dim: setup.capsule_dim,
            iterations: setup.iterations,
        },
    };
    let mut model = Model::new(spec, &mut rng)?;
    // unit-scale rows, like pretrained vectors; keeps gradients well above
    // central-difference noise
    let table = model.embedding.table;
    let mut emb = normal(&[setup.vocab_size, setup.embedding_size], 1.0, &mut rng);
    emb.data_mut()[..setup.embedding_size].fill(0.0);
    *model.store.value_mut(table) = emb;
    let ids: Vec<u32> = (0..setup.length)
        .map(|_| rng.random_range(1..setup.vocab_size as u32))
        .collect();
    let spans = if hierarchical {
        let cut = setup.length / 2;
        vec![(0, cut), (cut, setup.length - cut)]
    } else {
        vec![(0, setup.length)]
    };
    let label = rng.random_range(0..setup.classes);
    let config = GradCheckConfig {
        sparse: model.store.sparse_indices(),
        seed: setup.seed,
        ..GradCheckConfig::default()
    };
    finite_diff_check(
        &model.store.values(),
        |tape, vars| {
            let p = Bound::from(vars);
            let f = model.forward(tape, &p, &ids, &spans, &mut Mode::Eval)?;
            tape.nll(f.probs, &[label], LOG_FLOOR)
        },
        &config,
    )
}
