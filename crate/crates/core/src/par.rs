//! Data-parallel helpers with a sequential fallback.
//!
//! Work is split into fixed-size chunks and chunk results are combined in
//! index order, so results do not depend on the execution mode or the
//! number of worker threads.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    Parallel,
    Sequential,
}

impl Default for ExecMode {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }
}

/// Ordered map over `0..n`.
pub fn map_indexed<R, F>(mode: ExecMode, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Folds `0..n` chunk by chunk into accumulators made by `init`, then
/// merges the chunk accumulators left to right with `merge`.
pub fn fold_chunks<A, I, F, M>(mode: ExecMode, n: usize, chunk: usize, init: I, fold: F, merge: M) -> Option<A>
where
    A: Send,
    I: Fn() -> A + Sync + Send,
    F: Fn(&mut A, usize) + Sync + Send,
    M: Fn(&mut A, A),
{
    let chunk = chunk.max(1);
    let chunks = n.div_ceil(chunk);
    let parts = map_indexed(mode, chunks, |c| {
        let mut acc = init();
        for i in c * chunk..((c + 1) * chunk).min(n) {
            fold(&mut acc, i);
        }
        acc
    });
    let mut it = parts.into_iter();
    let mut first = it.next()?;
    for p in it {
        merge(&mut first, p);
    }
    Some(first)
}

/// Runs `f` on a pool of `workers` threads (0 = library default). Without
/// the `parallel` feature this just calls `f`.
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        if workers > 0 {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
                return pool.install(f);
            }
        }
    }
    let _ = workers;
    f()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let f = |i: usize| (i as f64 * 0.1).sin();
        assert_eq!(map_indexed(ExecMode::Parallel, 100, f), map_indexed(ExecMode::Sequential, 100, f));
        let sum = |m| {
            fold_chunks(m, 1000, 7, || 0.0f64, |a, i| *a += f(i), |a, b| *a += b).unwrap()
        };
        assert_eq!(sum(ExecMode::Parallel).to_bits(), sum(ExecMode::Sequential).to_bits());
        assert!(fold_chunks(ExecMode::Sequential, 0, 4, || 0, |_, _| {}, |_, _| {}).is_none());
    }
}
