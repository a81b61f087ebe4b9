//! Data-parallel helpers.
//!
//! With the `parallel` feature the helpers dispatch to rayon; without it they
//! run the same closures in index order. Every helper assigns each output slot
//! to exactly one closure call, so results are bit-identical in both modes.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many multiply-adds a kernel stays on the calling thread.
pub const PARALLEL_WORK_THRESHOLD: usize = 1 << 15;

/// Calls `f(row_index, row)` for every `row_len`-sized chunk of `data`.
pub fn for_each_row<F>(data: &mut [f64], row_len: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if work >= PARALLEL_WORK_THRESHOLD {
        data.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = work;
    data.chunks_mut(row_len)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}

/// Evaluates `f(0..n)` and collects the results in index order.
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// True when the crate was built with rayon support.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// Runs `f` on a dedicated pool of `threads` workers. Without the
/// `parallel` feature everything is already single-threaded and `f` runs
/// directly.
pub fn with_threads<T, F>(threads: usize, f: F) -> crate::Result<T>
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    if threads == 0 {
        return Err(crate::Error::Invalid(
            "thread count must be at least 1".into(),
        ));
    }
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| crate::Error::Invalid(e.to_string()))?;
        Ok(pool.install(f))
    }
    #[cfg(not(feature = "parallel"))]
    {
        Ok(f())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_thread_pool_gives_same_results() {
        let f = |i: usize| (i as f64).sqrt().sin();
        let many = map_indices(1000, f);
        let one = with_threads(1, || map_indices(1000, f)).unwrap();
        assert_eq!(many, one);
        assert!(with_threads(0, || ()).is_err());
    }

    #[test]
    fn rows_visited_once() {
        let mut data = vec![0.0; 4 * 3];
        for_each_row(&mut data, 3, usize::MAX, |i, row| {
            row.iter_mut().for_each(|v| *v += i as f64)
        });
        assert_eq!(data, vec![0., 0., 0., 1., 1., 1., 2., 2., 2., 3., 3., 3.]);
    }
}
