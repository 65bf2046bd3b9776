//! Data-parallel execution helpers.
//!
//! With the `parallel` feature (default) batch work is spread over a
//! rayon pool; without it the same entry points run sequentially. Both
//! lanes produce results in index order, so outputs are identical
//! regardless of the feature or thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How a batch entry point executes its per-item work.
///
/// `Auto` uses the rayon pool when the `parallel` feature is enabled and
/// degrades to sequential execution otherwise. `Sequential` always runs
/// in the calling thread; it exists so benchmarks can compare both lanes
/// in one build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    #[default]
    Auto,
    Sequential,
}

/// Map `f` over `0..n`, collecting results in index order.
pub fn indexed_map<R, F>(mode: ExecMode, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match mode {
        ExecMode::Sequential => (0..n).map(f).collect(),
        ExecMode::Auto => {
            #[cfg(feature = "parallel")]
            {
                (0..n).into_par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                (0..n).map(f).collect()
            }
        }
    }
}

/// Map `f` over a slice, collecting results in input order.
pub fn slice_map<T, R, F>(mode: ExecMode, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match mode {
        ExecMode::Sequential => items.iter().map(f).collect(),
        ExecMode::Auto => {
            #[cfg(feature = "parallel")]
            {
                items.par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                items.iter().map(f).collect()
            }
        }
    }
}
