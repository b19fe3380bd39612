//! Runtime switch between rayon-backed and sequential execution.
//!
//! Every data-parallel loop in the crate goes through the helpers below. They
//! partition work into fixed-size chunks and combine partial results in chunk
//! order, so switching execution modes (or thread counts) never changes a
//! single bit of the output — parallelism is purely a scheduling concern.
//! Benchmarks flip the mode at runtime to compare both paths in one binary.

use std::sync::atomic::{AtomicU8, Ordering};

/// Execution strategy for the crate's data-parallel loops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    /// Plain sequential loops.
    Sequential,
    /// Rayon work-stealing over fixed chunks. Without the `parallel` feature
    /// this mode is unavailable and requests for it fall back to sequential.
    Parallel,
}

const SEQUENTIAL: u8 = 0;
const PARALLEL: u8 = 1;

#[cfg(feature = "parallel")]
static EXEC: AtomicU8 = AtomicU8::new(PARALLEL);
#[cfg(not(feature = "parallel"))]
static EXEC: AtomicU8 = AtomicU8::new(SEQUENTIAL);

/// Selects the execution mode for subsequent solver calls (process-wide).
pub fn set_exec(exec: Exec) {
    let value = match exec {
        Exec::Sequential => SEQUENTIAL,
        #[cfg(feature = "parallel")]
        Exec::Parallel => PARALLEL,
        #[cfg(not(feature = "parallel"))]
        Exec::Parallel => SEQUENTIAL,
    };
    EXEC.store(value, Ordering::Relaxed);
}

/// Returns the currently selected execution mode.
pub fn current_exec() -> Exec {
    match EXEC.load(Ordering::Relaxed) {
        SEQUENTIAL => Exec::Sequential,
        _ => Exec::Parallel,
    }
}

/// Work items per scheduling chunk. Fixed so that chunked reductions group
/// addends identically in both execution modes.
pub(crate) const CHUNK: usize = 1024;

fn parallel_active() -> bool {
    current_exec() == Exec::Parallel
}

/// Maps `f` over `0..n` and collects the results in index order.
pub(crate) fn map_collect<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if parallel_active() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = parallel_active();
    (0..n).map(f).collect()
}

/// Builds an `n × width` row-major buffer, filling each row independently.
pub(crate) fn build_rows<F>(n: usize, width: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    let mut data = vec![0.0; n * width];
    if width == 0 {
        return data;
    }
    #[cfg(feature = "parallel")]
    if parallel_active() {
        use rayon::prelude::*;
        data.par_chunks_mut(width)
            .enumerate()
            .for_each(|(row, slice)| f(row, slice));
        return data;
    }
    for (row, slice) in data.chunks_mut(width).enumerate() {
        f(row, slice);
    }
    data
}

/// Sums `f(i)` over `0..n` with a fixed chunking of the index range, giving a
/// result independent of execution mode.
pub(crate) fn chunked_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Send + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    let partial = |c: usize| -> f64 {
        let lo = c * CHUNK;
        let hi = usize::min(lo + CHUNK, n);
        (lo..hi).map(&f).sum()
    };
    let partials: Vec<f64> = map_collect(chunks, partial);
    partials.iter().sum()
}
