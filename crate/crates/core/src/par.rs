//! Chunked data-parallel helpers with a sequential fallback.
//!
//! Work is always split into fixed-size chunks and partial results are
//! returned in chunk order, so any reduction the caller performs over them
//! is identical whether the chunks ran on a thread pool or one after the
//! other. Without the `parallel` feature only the sequential path exists.

use std::sync::atomic::{AtomicBool, Ordering};

/// Rows per work unit. Fixed so that reductions are reproducible.
pub const CHUNK_ROWS: usize = 64 * 1024;

static SEQUENTIAL: AtomicBool = AtomicBool::new(false);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Parallel,
    Sequential,
}

/// Selects the execution mode process-wide. Ignored when the crate is built
/// without the `parallel` feature.
pub fn set_mode(mode: Mode) {
    SEQUENTIAL.store(mode == Mode::Sequential, Ordering::Relaxed);
}

pub fn mode() -> Mode {
    if cfg!(feature = "parallel") && !SEQUENTIAL.load(Ordering::Relaxed) {
        Mode::Parallel
    } else {
        Mode::Sequential
    }
}

/// Applies `f` to consecutive `chunk`-sized slices of `items`, returning the
/// per-chunk results in order.
pub fn map_chunks<T, R, F>(items: &[T], chunk: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> R + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if mode() == Mode::Parallel {
        use rayon::prelude::*;
        return items.par_chunks(chunk).map(f).collect();
    }
    items.chunks(chunk).map(f).collect()
}

/// Maps every element independently, preserving order.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode() == Mode::Parallel {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

/// Maps each index in `0..n`, preserving order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode() == Mode::Parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_results_keep_order() {
        let data: Vec<u64> = (0..10_000).collect();
        let sums = map_chunks(&data, 1000, |c| c.iter().sum::<u64>());
        assert_eq!(sums.len(), 10);
        assert_eq!(sums[0], (0..1000).sum::<u64>());
        assert_eq!(sums.iter().sum::<u64>(), data.iter().sum::<u64>());
    }

    #[test]
    fn empty_input_yields_no_chunks() {
        let data: Vec<u8> = Vec::new();
        assert!(map_chunks(&data, 16, |c| c.len()).is_empty());
        assert!(map_range(0, |i| i).is_empty());
    }
}
