//! Aggregation of a variable-length encoder output `H` (`L × n`) into a
//! fixed-size encoding.
//!
//! Pooling and self-attention weigh the rows of `H` by a fixed rule.
//! Dynamic routing instead transforms every row into one message per
//! output capsule and iteratively refines coupling coefficients from the
//! agreement between messages and the capsules they produce:
//!
//! ```text
//! b = 0
//! repeat T times:
//!     c = softmax(b)            over capsules (standard) or inputs (reversed)
//!     s_j = Σ_i c_ij · u_ij
//!     v_j = squash(s_j)
//!     b_ij += v_j · u_ij
//! ```
//!
//! Padding rows are dropped before any of this runs, so they never enter a
//! softmax and contribute no messages.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{normal, xavier_normal, Bound, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Each input distributes itself over the output capsules.
    Standard,
    /// Each output capsule distributes its intake over the inputs.
    Reversed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AggregatorKind {
    Max,
    Avg,
    Attention,
    Routing(Direction),
}

impl AggregatorKind {
    pub const ALL: [AggregatorKind; 5] = [
        AggregatorKind::Max,
        AggregatorKind::Avg,
        AggregatorKind::Attention,
        AggregatorKind::Routing(Direction::Standard),
        AggregatorKind::Routing(Direction::Reversed),
    ];

    pub fn is_routing(self) -> bool {
        matches!(self, AggregatorKind::Routing(_))
    }
}

impl fmt::Display for AggregatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggregatorKind::Max => "max",
            AggregatorKind::Avg => "avg",
            AggregatorKind::Attention => "attn",
            AggregatorKind::Routing(Direction::Standard) => "dr-standard",
            AggregatorKind::Routing(Direction::Reversed) => "dr-reversed",
        })
    }
}

impl FromStr for AggregatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "max" => AggregatorKind::Max,
            "avg" => AggregatorKind::Avg,
            "attn" => AggregatorKind::Attention,
            "dr-standard" => AggregatorKind::Routing(Direction::Standard),
            "dr-reversed" => AggregatorKind::Routing(Direction::Reversed),
            other => {
                return Err(Error::config(format!(
                    "unknown aggregator `{other}` (expected max|avg|attn|dr-standard|dr-reversed)"
                )))
            }
        })
    }
}

/// Indices of unmasked rows; errors when there are none.
fn real_rows(mask: &[bool], len: usize) -> Result<Vec<usize>> {
    if mask.len() != len {
        return Err(Error::contract(format!(
            "mask length {} does not match {len} rows",
            mask.len()
        )));
    }
    let rows: Vec<usize> = (0..len).filter(|&i| mask[i]).collect();
    if rows.is_empty() {
        return Err(Error::contract(
            "aggregation needs at least one unmasked row",
        ));
    }
    Ok(rows)
}

/// Restricts `h` to its unmasked rows.
fn select_real(tape: &mut Tape<'_>, h: Var, mask: &[bool]) -> Result<(Var, Vec<usize>)> {
    let len = match tape.shape(h) {
        [l, _] => *l,
        s => return Err(Error::dim("aggregate", s, &[0, 0])),
    };
    let rows = real_rows(mask, len)?;
    if rows.len() == len {
        Ok((h, rows))
    } else {
        Ok((tape.gather_rows(h, &rows)?, rows))
    }
}

/// Per-dimension maximum over unmasked rows.
pub fn max_pool(tape: &mut Tape<'_>, h: Var, mask: &[bool]) -> Result<Var> {
    let (h, _) = select_real(tape, h, mask)?;
    tape.max(h, 0)
}

/// Mean over unmasked rows.
pub fn avg_pool(tape: &mut Tape<'_>, h: Var, mask: &[bool]) -> Result<Var> {
    let (h, rows) = select_real(tape, h, mask)?;
    let s = tape.sum(h, 0)?;
    tape.scale(s, 1.0 / rows.len() as f64)
}

/// Softmax weights over unmasked rows from `qᵀh_i`, returned as `L_real × 1`.
pub fn attention_weights(tape: &mut Tape<'_>, h: Var, query: Var, mask: &[bool]) -> Result<Var> {
    let (h, _) = select_real(tape, h, mask)?;
    let scores = tape.matmul(h, query)?;
    tape.softmax(scores, 0)
}

/// `Σ_i a_i h_i` with `a = softmax_i(qᵀh_i)` over unmasked rows.
pub fn self_attention(tape: &mut Tape<'_>, h: Var, query: Var, mask: &[bool]) -> Result<Var> {
    let (hr, _) = select_real(tape, h, mask)?;
    let scores = tape.matmul(hr, query)?;
    let a = tape.softmax(scores, 0)?;
    let at = tape.transpose(a)?;
    let e = tape.matmul(at, hr)?;
    let n = tape.shape(e)[1];
    tape.reshape(e, &[n])
}

/// One affine map per output capsule, packed side by side: column block
/// `j` of `weight` (`n × M·d_c`) and slice `j` of `bias` form `θ_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformWeights {
    pub weight: ParamId,
    pub bias: ParamId,
    pub capsules: usize,
    pub capsule_dim: usize,
}

impl TransformWeights {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        capsules: usize,
        capsule_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        // Each θ_j is drawn independently with its own fan-out.
        let blocks: Vec<Tensor> = (0..capsules)
            .map(|_| xavier_normal(input, capsule_dim, rng))
            .collect();
        let mut w = Vec::with_capacity(input * capsules * capsule_dim);
        for r in 0..input {
            for b in &blocks {
                w.extend_from_slice(b.row(r));
            }
        }
        let weight = Tensor::new(vec![input, capsules * capsule_dim], w).expect("packed shape");
        TransformWeights {
            weight: store.add(format!("{name}.weight"), weight, true),
            bias: store.add(
                format!("{name}.bias"),
                Tensor::zeros(&[capsules * capsule_dim]),
                true,
            ),
            capsules,
            capsule_dim,
        }
    }
}

/// Messages `u_ij = θ_j(h_i)` for every row, shaped `L × M × d_c`.
pub fn transform_messages(
    tape: &mut Tape<'_>,
    h: Var,
    weight: Var,
    bias: Var,
    capsules: usize,
    capsule_dim: usize,
) -> Result<Var> {
    if tape.shape(weight).get(1) != Some(&(capsules * capsule_dim)) {
        return Err(Error::dim(
            "transform_messages",
            tape.shape(weight),
            &[capsules, capsule_dim],
        ));
    }
    let rows = tape.shape(h)[0];
    let u = tape.matmul(h, weight)?;
    let u = tape.add_row(u, bias)?;
    tape.reshape(u, &[rows, capsules, capsule_dim])
}

/// Everything one routing pass computed, for inspection and visualization.
///
/// Matrices indexed by input position cover all `L` positions; masked
/// positions hold zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingState {
    pub direction: Direction,
    pub iterations: usize,
    pub mask: Vec<bool>,
    /// Cached `u_ij`, `L × M × d_c`.
    pub messages: Tensor,
    /// Routing logits `b` after the last update, `L × M`.
    pub logits: Tensor,
    /// Coupling coefficients `c` of every iteration, each `L × M`.
    pub coupling: Vec<Tensor>,
    /// Capsule inputs `s` of every iteration, each `M × d_c`.
    pub pre_squash: Vec<Tensor>,
    /// Output capsules `v` of every iteration, each `M × d_c`.
    pub capsules: Vec<Tensor>,
}

impl RoutingState {
    /// Couplings that produced the returned capsules.
    pub fn final_coupling(&self) -> &Tensor {
        self.coupling.last().expect("at least one iteration")
    }

    pub fn output(&self) -> &Tensor {
        self.capsules.last().expect("at least one iteration")
    }

    pub fn num_capsules(&self) -> usize {
        self.logits.shape()[1]
    }

    /// Writes rows `level  capsule_j  position_i  token  c_ij` for one
    /// iteration (1-based; `None` = last). Values use shortest round-trip
    /// formatting, so parsing them back is exact.
    pub fn write_tsv(
        &self,
        out: &mut impl Write,
        level: &str,
        tokens: &[String],
        iteration: Option<usize>,
    ) -> Result<()> {
        let c = self.coupling_at(iteration)?;
        let (len, m) = (c.shape()[0], c.shape()[1]);
        if tokens.len() != len {
            return Err(Error::contract(format!(
                "{} tokens for {len} routed positions",
                tokens.len()
            )));
        }
        for j in 0..m {
            for (i, tok) in tokens.iter().enumerate() {
                writeln!(out, "{level}\t{j}\t{i}\t{tok}\t{}", c.at2(i, j))?;
            }
        }
        Ok(())
    }

    pub fn coupling_at(&self, iteration: Option<usize>) -> Result<&Tensor> {
        match iteration {
            None => Ok(self.final_coupling()),
            Some(t) if (1..=self.coupling.len()).contains(&t) => Ok(&self.coupling[t - 1]),
            Some(t) => Err(Error::config(format!(
                "iteration {t} outside 1..={}",
                self.coupling.len()
            ))),
        }
    }
}

pub const ROUTING_TSV_HEADER: &str = "level\tcapsule_j\tposition_i\ttoken\tc_ij";

fn expand_rows(t: &Tensor, rows: &[usize], len: usize) -> Tensor {
    let width = t.len() / rows.len().max(1);
    let mut shape = t.shape().to_vec();
    shape[0] = len;
    let mut out = Tensor::zeros(&shape);
    for (k, &i) in rows.iter().enumerate() {
        out.data_mut()[i * width..(i + 1) * width]
            .copy_from_slice(&t.data()[k * width..(k + 1) * width]);
    }
    out
}

/// Dynamic routing of `h` (`L × n`) into `M` capsules of size `d_c`.
///
/// Gradients flow through the whole unrolled loop, logit updates included.
#[allow(clippy::too_many_arguments)]
pub fn route(
    tape: &mut Tape<'_>,
    h: Var,
    weight: Var,
    bias: Var,
    capsules: usize,
    capsule_dim: usize,
    iterations: usize,
    direction: Direction,
    mask: &[bool],
) -> Result<(Var, RoutingState)> {
    if iterations < 1 {
        return Err(Error::config("iterations must be ≥ 1"));
    }
    if capsules < 1 {
        return Err(Error::config("capsule number must be ≥ 1"));
    }
    let len = tape.shape(h)[0];
    let (hr, rows) = select_real(tape, h, mask)?;
    let u = transform_messages(tape, hr, weight, bias, capsules, capsule_dim)?;
    let axis = match direction {
        Direction::Standard => 1,
        Direction::Reversed => 0,
    };
    let mut b = tape.constant(Tensor::zeros(&[rows.len(), capsules]));
    let mut coupling = Vec::with_capacity(iterations);
    let mut pre_squash = Vec::with_capacity(iterations);
    let mut outputs = Vec::with_capacity(iterations);
    let mut v = None;
    for _ in 0..iterations {
        let c = tape.softmax(b, axis)?;
        let s = tape.capsule_sum(c, u)?;
        let vj = tape.squash(s)?;
        let agree = tape.agreement(u, vj)?;
        b = tape.add(b, agree)?;
        coupling.push(expand_rows(tape.value(c), &rows, len));
        pre_squash.push(tape.value(s).clone());
        outputs.push(tape.value(vj).clone());
        v = Some(vj);
    }
    let state = RoutingState {
        direction,
        iterations,
        mask: mask.to_vec(),
        messages: expand_rows(tape.value(u), &rows, len),
        logits: expand_rows(tape.value(b), &rows, len),
        coupling,
        pre_squash,
        capsules: outputs,
    };
    Ok((v.expect("iterations ≥ 1"), state))
}

/// Flattens `M × d_c` capsules into one `M·d_c` vector in capsule order.
pub fn concat_capsules(tape: &mut Tape<'_>, v: Var) -> Result<Var> {
    let n = tape.value(v).len();
    tape.reshape(v, &[n])
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttention {
    pub query: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Routing {
    pub transform: TransformWeights,
    pub iterations: usize,
    pub direction: Direction,
}

/// An aggregator together with its trainable weights.
#[derive(Clone, Debug, PartialEq)]
pub enum Aggregator {
    Max,
    Avg,
    Attention(SelfAttention),
    Routing(Routing),
}

/// Shape settings for building an [`Aggregator`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AggregatorShape {
    pub capsules: usize,
    pub capsule_dim: usize,
    pub iterations: usize,
}

impl Aggregator {
    pub fn new(
        kind: AggregatorKind,
        store: &mut ParamStore,
        name: &str,
        input: usize,
        shape: AggregatorShape,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(match kind {
            AggregatorKind::Max => Aggregator::Max,
            AggregatorKind::Avg => Aggregator::Avg,
            AggregatorKind::Attention => {
                let q = normal(&[input, 1], (2.0 / (input + 1) as f64).sqrt(), rng);
                Aggregator::Attention(SelfAttention {
                    query: store.add(format!("{name}.query"), q, true),
                })
            }
            AggregatorKind::Routing(direction) => {
                if shape.iterations < 1 {
                    return Err(Error::config("iterations must be ≥ 1"));
                }
                if shape.capsules < 1 || shape.capsule_dim < 1 {
                    return Err(Error::config("capsule number and dimension must be ≥ 1"));
                }
                Aggregator::Routing(Routing {
                    transform: TransformWeights::new(
                        store,
                        &format!("{name}.transform"),
                        input,
                        shape.capsules,
                        shape.capsule_dim,
                        rng,
                    ),
                    iterations: shape.iterations,
                    direction,
                })
            }
        })
    }

    pub fn kind(&self) -> AggregatorKind {
        match self {
            Aggregator::Max => AggregatorKind::Max,
            Aggregator::Avg => AggregatorKind::Avg,
            Aggregator::Attention(_) => AggregatorKind::Attention,
            Aggregator::Routing(r) => AggregatorKind::Routing(r.direction),
        }
    }

    pub fn output_dim(&self, input: usize) -> usize {
        match self {
            Aggregator::Routing(r) => r.transform.capsules * r.transform.capsule_dim,
            _ => input,
        }
    }

    /// Fixed-size encoding of `h`, plus the routing state for routing aggregators.
    pub fn aggregate(
        &self,
        tape: &mut Tape<'_>,
        p: &Bound,
        h: Var,
        mask: &[bool],
    ) -> Result<(Var, Option<RoutingState>)> {
        match self {
            Aggregator::Max => Ok((max_pool(tape, h, mask)?, None)),
            Aggregator::Avg => Ok((avg_pool(tape, h, mask)?, None)),
            Aggregator::Attention(a) => Ok((self_attention(tape, h, p.var(a.query), mask)?, None)),
            Aggregator::Routing(r) => {
                let (v, state) = route(
                    tape,
                    h,
                    p.var(r.transform.weight),
                    p.var(r.transform.bias),
                    r.transform.capsules,
                    r.transform.capsule_dim,
                    r.iterations,
                    r.direction,
                    mask,
                )?;
                Ok((concat_capsules(tape, v)?, Some(state)))
            }
        }
    }
}

/// Two-level encoding result.
#[derive(Debug)]
pub struct HierarchicalEncoding {
    pub encoding: Var,
    /// Word-level routing state per sentence (routing aggregators only).
    pub word_states: Vec<Option<RoutingState>>,
    pub sentence_state: Option<RoutingState>,
}

/// Aggregates each sentence's encoder rows, then aggregates the resulting
/// sentence encodings into one document encoding.
pub fn hierarchical_encode(
    tape: &mut Tape<'_>,
    p: &Bound,
    sentences: &[(Var, Vec<bool>)],
    word_agg: &Aggregator,
    sentence_agg: &Aggregator,
) -> Result<HierarchicalEncoding> {
    if sentences.is_empty() {
        return Err(Error::contract("document has no sentences"));
    }
    let mut encodings = Vec::with_capacity(sentences.len());
    let mut word_states = Vec::with_capacity(sentences.len());
    for (h, mask) in sentences {
        let (e, state) = word_agg.aggregate(tape, p, *h, mask)?;
        let n = tape.value(e).len();
        encodings.push(tape.reshape(e, &[1, n])?);
        word_states.push(state);
    }
    let stacked = tape.concat(&encodings, 0)?;
    let all = vec![true; sentences.len()];
    let (encoding, sentence_state) = sentence_agg.aggregate(tape, p, stacked, &all)?;
    Ok(HierarchicalEncoding {
        encoding,
        word_states,
        sentence_state,
    })
}
