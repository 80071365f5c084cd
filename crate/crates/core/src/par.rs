use std::ops::Range;

/// Rows per work unit. Fixed so the partition (and therefore every result) is
/// independent of the thread count.
pub(crate) const CHUNK_ROWS: usize = 64;

pub(crate) fn chunks(n: usize) -> Vec<Range<usize>> {
    (0..n)
        .step_by(CHUNK_ROWS)
        .map(|s| s..(s + CHUNK_ROWS).min(n))
        .collect()
}

/// Maps `f` over fixed row chunks, in parallel when the `parallel` feature is on.
/// Output order follows chunk order.
pub(crate) fn map_chunks<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
{
    let parts = chunks(n);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        parts.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        parts.into_iter().map(f).collect()
    }
}
