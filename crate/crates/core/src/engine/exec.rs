/// How per-sample work inside a batch is scheduled.
///
/// Both modes produce bit-identical results: per-sample partial results are
/// combined in a fixed order regardless of which thread produced them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    /// Single-threaded reference path.
    #[default]
    Sequential,
    /// Samples of a batch run on the rayon pool. Falls back to sequential
    /// when the crate is built without the `parallel` feature.
    Parallel,
}

impl ExecMode {
    pub fn is_parallel_available() -> bool {
        cfg!(feature = "parallel")
    }
}

/// Runs `f` for every sample index and returns the results in index order.
/// `init` builds the per-worker scratch state.
pub(crate) fn map_samples<R, S, I, F>(mode: ExecMode, n: usize, init: I, f: F) -> Vec<R>
where
    R: Send,
    I: Fn() -> S + Send + Sync,
    F: Fn(usize, &mut S) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if mode == ExecMode::Parallel && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map_init(init, |s, i| f(i, s)).collect();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = mode;
    let mut scratch = init();
    (0..n).map(|i| f(i, &mut scratch)).collect()
}

/// Calls `f(i, row_i)` for every `row_len`-sized row of `data`.
pub(crate) fn for_each_row<T, S, I, F>(mode: ExecMode, data: &mut [T], row_len: usize, init: I, f: F)
where
    T: Send,
    I: Fn() -> S + Send + Sync,
    F: Fn(usize, &mut [T], &mut S) + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if mode == ExecMode::Parallel {
        use rayon::prelude::*;
        data.par_chunks_mut(row_len)
            .enumerate()
            .for_each_init(init, |s, (i, row)| f(i, row, s));
        return;
    }
    #[cfg(not(feature = "parallel"))]
    let _ = mode;
    let mut scratch = init();
    for (i, row) in data.chunks_mut(row_len).enumerate() {
        f(i, row, &mut scratch);
    }
}

/// Like [`for_each_row`] over two row-aligned buffers at once.
pub(crate) fn for_each_row_pair<A, B, S, I, F>(
    mode: ExecMode,
    a: &mut [A],
    a_len: usize,
    b: &mut [B],
    b_len: usize,
    init: I,
    f: F,
) where
    A: Send,
    B: Send,
    I: Fn() -> S + Send + Sync,
    F: Fn(usize, &mut [A], &mut [B], &mut S) + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if mode == ExecMode::Parallel {
        use rayon::prelude::*;
        a.par_chunks_mut(a_len)
            .zip(b.par_chunks_mut(b_len))
            .enumerate()
            .for_each_init(init, |s, (i, (ra, rb))| f(i, ra, rb, s));
        return;
    }
    #[cfg(not(feature = "parallel"))]
    let _ = mode;
    let mut scratch = init();
    for (i, (ra, rb)) in a.chunks_mut(a_len).zip(b.chunks_mut(b_len)).enumerate() {
        f(i, ra, rb, &mut scratch);
    }
}
