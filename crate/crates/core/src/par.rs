//! Execution policy for the data-parallel loops.
//!
//! With the `parallel` feature, [`Exec::Parallel`] runs on the rayon global
//! pool. [`Exec::Sequential`] always walks items in index order, so floating
//! point reductions are reproducible bit for bit. Without the feature both
//! variants run sequentially, as does a single-thread pool.

use serde::{Deserialize, Serialize};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exec {
    #[default]
    Parallel,
    Sequential,
}

impl Exec {
    /// True when work is actually split across threads: the feature is on,
    /// `Parallel` is requested and the pool has more than one thread.
    pub fn is_parallel(self) -> bool {
        #[cfg(feature = "parallel")]
        return self == Exec::Parallel && rayon::current_num_threads() > 1;
        #[cfg(not(feature = "parallel"))]
        false
    }
}

/// Map `f` over `0..n`, preserving order.
pub fn map<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Apply `f` to every element of `items` with its index.
pub fn for_each_mut<T, F>(exec: Exec, items: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        items.par_iter_mut().enumerate().for_each(|(i, t)| f(i, t));
        return;
    }
    let _ = exec;
    items.iter_mut().enumerate().for_each(|(i, t)| f(i, t));
}

/// Fold items `0..n` into accumulators created by `init`, then merge them.
///
/// Sequential mode uses a single accumulator and visits items in order.
pub fn fold<A, I, S, M>(exec: Exec, n: usize, init: I, step: S, merge: M) -> A
where
    A: Send,
    I: Fn() -> A + Send + Sync,
    S: Fn(&mut A, usize) + Send + Sync,
    M: Fn(&mut A, A) + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return (0..n)
            .into_par_iter()
            .fold(&init, |mut acc, i| {
                step(&mut acc, i);
                acc
            })
            .reduce(&init, |mut a, b| {
                merge(&mut a, b);
                a
            });
    }
    let _ = (exec, &merge);
    let mut acc = init();
    for i in 0..n {
        step(&mut acc, i);
    }
    acc
}

/// Dot product with an execution-dependent reduction order.
pub fn dot(exec: Exec, a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    #[cfg(feature = "parallel")]
    if exec.is_parallel() && a.len() > 1 << 14 {
        return a.par_iter().zip(b.par_iter()).map(|(x, y)| x * y).sum();
    }
    let _ = exec;
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
