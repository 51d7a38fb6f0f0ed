//! Chunked iteration that runs on rayon when the `parallel` feature is on and
//! falls back to a plain loop otherwise.
//!
//! Callers split their output into disjoint chunks; each chunk is written by
//! exactly one closure call, so per-element summation order never depends on
//! the thread count.

/// Outputs shorter than this stay on the calling thread; dispatch costs more than the work.
pub const MIN_PARALLEL_LEN: usize = 2048;

/// Calls `f(chunk_index, chunk)` for every `chunk_len`-sized piece of `data`.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if data.len() >= MIN_PARALLEL_LEN && data.len() > chunk_len && rayon::current_num_threads() > 1 {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Runs `f` with the kernels restricted to `threads` workers.
///
/// Without the `parallel` feature this just calls `f`.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        match rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
        {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}

/// Whether this build dispatches kernels onto a thread pool.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
