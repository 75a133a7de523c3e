//! Embedding lookup, bidirectional LSTM encoder and MLP classifier head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{normal, xavier_normal, Bound, ParamId, ParamStore};

/// Reserved vocabulary ids.
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

/// Forward-pass mode. Dropout only fires in training.
pub enum Mode<'r> {
    Eval,
    Train {
        dropout: f64,
        rng: &'r mut ChaCha8Rng,
    },
}

impl Mode<'_> {
    /// Inverted dropout: kept entries are scaled by `1/keep`.
    pub fn dropout(&mut self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        match self {
            Mode::Train { dropout, rng } if *dropout > 0.0 => {
                let keep = 1.0 - *dropout;
                let n = tape.value(x).len();
                let mask = (0..n)
                    .map(|_| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                tape.dropout_apply(x, mask)
            }
            _ => Ok(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
}

impl Embedding {
    /// Random table with rows ~ N(0, 0.1) and a zero padding row.
    pub fn new(store: &mut ParamStore, vocab_size: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let mut t = normal(&[vocab_size, dim], 0.1, rng);
        t.data_mut()[..dim.min(vocab_size * dim)].fill(0.0);
        Self::from_table(store, t)
    }

    pub fn from_table(store: &mut ParamStore, table: Tensor) -> Self {
        let (vocab_size, dim) = (table.shape()[0], table.shape()[1]);
        let table = store.add_sparse("embedding", table, false);
        Embedding {
            table,
            vocab_size,
            dim,
        }
    }

    /// Looks up `ids`, returning the `L × d` rows and the non-padding mask.
    pub fn embed(&self, tape: &mut Tape<'_>, p: &Bound, ids: &[u32]) -> Result<(Var, Vec<bool>)> {
        let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        if let Some(&bad) = rows.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::Lookup {
                id: bad,
                size: self.vocab_size,
            });
        }
        let x = tape.gather_rows(p.var(self.table), &rows)?;
        let mask = ids.iter().map(|&i| i != PAD_ID).collect();
        Ok((x, mask))
    }
}

/// One LSTM direction. Gates are packed `[input, forget, candidate, output]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut bias = Tensor::zeros(&[4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        LstmCell {
            w_input: store.add(
                format!("{name}.w_input"),
                xavier_normal(input, 4 * hidden, rng),
                true,
            ),
            w_hidden: store.add(
                format!("{name}.w_hidden"),
                xavier_normal(hidden, 4 * hidden, rng),
                true,
            ),
            bias: store.add(format!("{name}.bias"), bias, true),
            hidden,
        }
    }

    /// Runs over `x` (`L × d`) in the given time order, returning one
    /// `1 × u` output per position; masked positions carry state through
    /// and emit `None`.
    fn run(
        &self,
        tape: &mut Tape<'_>,
        p: &Bound,
        x: Var,
        mask: &[bool],
        order: impl Iterator<Item = usize>,
    ) -> Result<Vec<Option<Var>>> {
        let u = self.hidden;
        let projected = tape.matmul(x, p.var(self.w_input))?;
        let projected = tape.add_row(projected, p.var(self.bias))?;
        let mut h = tape.constant(Tensor::zeros(&[1, u]));
        let mut c = tape.constant(Tensor::zeros(&[1, u]));
        let mut out = vec![None; mask.len()];
        for t in order {
            if !mask[t] {
                continue;
            }
            let xt = tape.slice(projected, 0, t, 1)?;
            let rec = tape.matmul(h, p.var(self.w_hidden))?;
            let z = tape.add(xt, rec)?;
            let i = tape.slice(z, 1, 0, u)?;
            let i = tape.sigmoid(i)?;
            let f = tape.slice(z, 1, u, u)?;
            let f = tape.sigmoid(f)?;
            let g = tape.slice(z, 1, 2 * u, u)?;
            let g = tape.tanh(g)?;
            let o = tape.slice(z, 1, 3 * u, u)?;
            let o = tape.sigmoid(o)?;
            let keep = tape.mul(f, c)?;
            let write = tape.mul(i, g)?;
            c = tape.add(keep, write)?;
            let tc = tape.tanh(c)?;
            h = tape.mul(o, tc)?;
            out[t] = Some(h);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiLstm {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

impl BiLstm {
    pub fn new(store: &mut ParamStore, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        BiLstm {
            forward: LstmCell::new(store, "lstm.fwd", input, hidden, rng),
            backward: LstmCell::new(store, "lstm.bwd", input, hidden, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden
    }

    pub fn output_dim(&self) -> usize {
        2 * self.forward.hidden
    }

    /// Encodes `x` (`L × d`) into `L × 2u` rows `[h_fwd ; h_bwd]`. Masked rows are zero.
    pub fn encode(&self, tape: &mut Tape<'_>, p: &Bound, x: Var, mask: &[bool]) -> Result<Var> {
        let len = tape.shape(x)[0];
        if len == 0 {
            return Err(Error::contract(
                "BiLSTM input must have at least one position",
            ));
        }
        if mask.len() != len {
            return Err(Error::contract(format!(
                "mask length {} does not match sequence length {len}",
                mask.len()
            )));
        }
        let fwd = self.forward.run(tape, p, x, mask, 0..len)?;
        let bwd = self.backward.run(tape, p, x, mask, (0..len).rev())?;
        let fwd = stack(tape, &fwd, self.forward.hidden)?;
        let bwd = stack(tape, &bwd, self.backward.hidden)?;
        tape.concat(&[fwd, bwd], 1)
    }
}

fn stack(tape: &mut Tape<'_>, rows: &[Option<Var>], width: usize) -> Result<Var> {
    let zero = if rows.iter().any(Option::is_none) {
        Some(tape.constant(Tensor::zeros(&[1, width])))
    } else {
        None
    };
    let rows: Vec<Var> = rows
        .iter()
        .map(|r| r.or(zero).expect("zero row allocated for masked positions"))
        .collect();
    tape.concat(&rows, 0)
}

/// One hidden rectifier layer followed by a softmax output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpHead {
    pub w_hidden: ParamId,
    pub b_hidden: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub input: usize,
    pub classes: usize,
}

impl MlpHead {
    pub fn new(
        store: &mut ParamStore,
        input: usize,
        hidden: usize,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Self {
        MlpHead {
            w_hidden: store.add("mlp.w_hidden", xavier_normal(input, hidden, rng), true),
            b_hidden: store.add("mlp.b_hidden", Tensor::zeros(&[hidden]), true),
            w_out: store.add("mlp.w_out", xavier_normal(hidden, classes, rng), true),
            b_out: store.add("mlp.b_out", Tensor::zeros(&[classes]), true),
            input,
            classes,
        }
    }

    /// Class logits (`1 × C`) for an encoding of `input` values.
    pub fn logits(
        &self,
        tape: &mut Tape<'_>,
        p: &Bound,
        e: Var,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let n = tape.value(e).len();
        if n != self.input {
            return Err(Error::dim("classify", tape.shape(e), &[self.input]));
        }
        let e = tape.reshape(e, &[1, n])?;
        let hid = tape.matmul(e, p.var(self.w_hidden))?;
        let hid = tape.add_row(hid, p.var(self.b_hidden))?;
        let hid = tape.relu(hid)?;
        let hid = mode.dropout(tape, hid)?;
        let out = tape.matmul(hid, p.var(self.w_out))?;
        tape.add_row(out, p.var(self.b_out))
    }

    /// Class probabilities (`1 × C`).
    pub fn classify(
        &self,
        tape: &mut Tape<'_>,
        p: &Bound,
        e: Var,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let logits = self.logits(tape, p, e, mode)?;
        tape.softmax(logits, 1)
    }
}
