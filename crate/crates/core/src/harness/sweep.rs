//! Grid over routing iterations and capsule counts.

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::exec::Execution;

use super::{train_and_evaluate, Corpus};

pub const SWEEP_HEADER: &str = "T\tM\tseed\tdev_acc\ttest_acc";

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub iterations: usize,
    pub capsules: usize,
    pub seed: u64,
    pub dev_accuracy: f64,
    pub test_accuracy: f64,
}

/// Trains one model per `(T, M, seed)` and reports its dev and test
/// accuracy. Rows come back sorted by `(T, M, seed)`. Runs execute
/// concurrently under a parallel `exec`.
pub fn iteration_sweep(
    base: &TrainConfig,
    corpus: &Corpus,
    t_values: &[usize],
    m_values: &[usize],
    seeds: &[u64],
    exec: Execution,
) -> Result<Vec<SweepRow>> {
    if t_values.is_empty() || m_values.is_empty() || seeds.is_empty() {
        return Err(Error::config(
            "sweep needs at least one T, one M and one seed",
        ));
    }
    if !base.aggregator.is_routing() {
        return Err(Error::config(format!(
            "sweep varies routing settings; aggregator `{}` has none",
            base.aggregator
        )));
    }
    if corpus.test.is_none() {
        return Err(Error::config("sweep needs a test set"));
    }
    let mut grid = Vec::new();
    for &t in t_values {
        for &m in m_values {
            for &seed in seeds {
                grid.push((t, m, seed));
            }
        }
    }
    grid.sort_unstable();
    grid.dedup();
    let runs = exec.map(&grid, |_, &(t, m, seed)| {
        let cfg = TrainConfig {
            iterations: t,
            capsules: m,
            seed,
            ..base.clone()
        };
        let run = train_and_evaluate(&cfg, corpus, exec, &mut |_| {})?;
        Ok(SweepRow {
            iterations: t,
            capsules: m,
            seed,
            dev_accuracy: run.dev.accuracy,
            test_accuracy: run.test.map_or(f64::NAN, |m| m.accuracy),
        })
    });
    runs.into_iter().collect()
}

pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.iterations, r.capsules, r.seed, r.dev_accuracy, r.test_accuracy
        ));
    }
    out
}
