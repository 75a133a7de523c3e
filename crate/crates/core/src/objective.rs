//! Cross-entropy objective with an L2 penalty, Adam, and learning-rate decay.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Probabilities below this are clamped before taking the log.
pub const LOG_FLOOR: f64 = 1e-12;

/// `−mean_b log p(target_b) + λ·Σ‖θ‖²` over the given parameters.
///
/// `probs` is `B × C`; `l2_params` should list the regularized
/// parameters only (embedding tables are normally excluded).
pub fn loss(
    tape: &mut Tape<'_>,
    probs: Var,
    targets: &[usize],
    l2_params: &[Var],
    lambda: f64,
) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::config("regularization rate must be ≥ 0"));
    }
    let mut total = tape.nll(probs, targets, LOG_FLOOR)?;
    if lambda > 0.0 {
        for &p in l2_params {
            let sq = tape.sum_squares(p)?;
            let term = tape.scale(sq, lambda)?;
            total = tape.add(total, term)?;
        }
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: f64,
    pub decay_steps: usize,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.initial.is_nan() || self.initial <= 0.0 {
            return Err(Error::config("learning rate must be > 0"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::config("learning rate decay must be in (0, 1]"));
        }
        if self.decay_steps < 1 {
            return Err(Error::config("learning rate decay steps must be ≥ 1"));
        }
        Ok(())
    }

    /// `initial · decay^(step / decay_steps)` with a continuous exponent.
    pub fn lr_at(&self, step: usize) -> f64 {
        self.initial * self.decay.powf(step as f64 / self.decay_steps as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zeroed moments for parameters of the given sizes.
    pub fn new(sizes: &[usize]) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || params.len() != self.first.len() {
            return Err(Error::contract(format!(
                "adam: {} parameters, {} gradients, state for {}",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.first[i].len() {
                return Err(Error::contract(format!(
                    "adam: gradient {i} has the wrong size"
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        grads.iter_mut().flatten().for_each(|x| *x *= k);
    }
    norm
}
