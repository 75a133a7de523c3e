//! Central-difference verification of tape gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates checked per tensor; smaller tensors are checked fully.
    pub samples_per_tensor: usize,
    pub seed: u64,
    /// Indices of tensors bound as row-sparse parameters.
    pub sparse: Vec<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            samples_per_tensor: 64,
            seed: 0,
            sparse: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max of `|g_ad − g_fd| / max(1e-8, |g_ad| + |g_fd|)` over checked coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    /// (tensor, coordinate) where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    /// Every checked coordinate.
    pub entries: Vec<GradCheckEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    /// Coordinates that miss both the relative and the absolute tolerance.
    /// Useful where true gradients are so small that difference noise
    /// dominates the relative error.
    pub fn count_exceeding(&self, rel_tol: f64, abs_tol: f64) -> usize {
        self.entries
            .iter()
            .filter(|e| {
                relative_error(e.analytic, e.numeric) >= rel_tol
                    && (e.analytic - e.numeric).abs() >= abs_tol
            })
            .count()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn bind<'a>(tape: &mut Tape<'a>, params: &'a [Tensor], sparse: &[usize]) -> Vec<Var> {
    params
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if sparse.contains(&i) {
                tape.sparse_param(p)
            } else {
                tape.param(p)
            }
        })
        .collect()
}

fn evaluate<F>(params: &[Tensor], f: &F, sparse: &[usize]) -> Result<f64>
where
    F: for<'a> Fn(&mut Tape<'a>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = bind(&mut tape, params, sparse);
    let loss = f(&mut tape, &vars)?;
    let v = tape.value(loss);
    if v.len() != 1 {
        return Err(Error::contract("gradient check needs a scalar function"));
    }
    Ok(v.item())
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` builds a scalar on the tape from the bound parameters. It must be
/// deterministic; the check is refused when two evaluations at the same
/// point disagree.
pub fn finite_diff_check<F>(
    params: &[Tensor],
    f: F,
    config: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Tape<'a>, &[Var]) -> Result<Var>,
{
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
        entries: Vec::new(),
    };
    if params.is_empty() {
        return Ok(report);
    }

    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let vars = bind(&mut tape, params, &config.sparse);
        let loss = f(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter()
            .zip(params)
            .map(|(&v, p)| grads.dense_wrt(v, p.shape()))
            .collect()
    };

    let base = evaluate(params, &f, &config.sparse)?;
    let again = evaluate(params, &f, &config.sparse)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::contract(
            "function is not deterministic; gradient check refused",
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut work = params.to_vec();
    let h = config.step;
    for t in 0..params.len() {
        let n = params[t].len();
        let coords: Vec<usize> = if n <= config.samples_per_tensor {
            (0..n).collect()
        } else {
            let mut c = index::sample(&mut rng, n, config.samples_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        for k in coords {
            let orig = work[t].data()[k];
            work[t].data_mut()[k] = orig + h;
            let plus = evaluate(&work, &f, &config.sparse)?;
            work[t].data_mut()[k] = orig - h;
            let minus = evaluate(&work, &f, &config.sparse)?;
            work[t].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[t][k], numeric);
            report.checked += 1;
            report.entries.push(GradCheckEntry {
                tensor: t,
                index: k,
                analytic: analytic[t][k],
                numeric,
            });
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((t, k));
            }
        }
    }
    Ok(report)
}
