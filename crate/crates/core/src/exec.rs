//! Data-parallel execution helpers.
//!
//! Per-record work (score collection, metric evaluation, boundary-distance
//! search) is a pure map over independent inputs, so it runs on rayon when the
//! `parallel` feature is enabled and falls back to a plain loop otherwise.
//! Results are collected in input order either way, so output is identical
//! across thread counts.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Name of the environment variable that caps worker threads.
pub const THREADS_ENV: &str = "NG_THREADS";

/// Configure the global thread pool from `NG_THREADS`, if set.
///
/// A no-op when the variable is absent, unparsable, or the pool was already
/// initialized, and always a no-op without the `parallel` feature.
pub fn init_threads_from_env() {
    #[cfg(feature = "parallel")]
    {
        if let Ok(raw) = std::env::var(THREADS_ENV) {
            if let Ok(n) = raw.trim().parse::<usize>() {
                if n > 0 {
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    }
}

/// Map `f` over `items`, in parallel when the `parallel` feature is on.
///
/// Output order always matches input order.
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_seq(items, f)
    }
}

/// Sequential map, kept available regardless of features for benchmarks and
/// for callers that need a strictly single-threaded path.
pub fn map_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Map over index ranges `0..n` in fixed chunks, in parallel when enabled.
///
/// `f` receives `(chunk_start, chunk_len)` and returns one value per chunk;
/// chunk boundaries are deterministic so results do not depend on scheduling.
pub fn map_chunks<U, F>(n: usize, chunk: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize, usize) -> U + Sync + Send,
{
    let chunk = chunk.max(1);
    let starts: Vec<usize> = (0..n).step_by(chunk).collect();
    map(&starts, |&s| f(s, chunk.min(n - s)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let xs: Vec<u64> = (0..1000).collect();
        let ys = map(&xs, |x| x * 2);
        let zs = map_seq(&xs, |x| x * 2);
        assert_eq!(ys, zs);
    }

    #[test]
    fn chunked_map_covers_everything() {
        let sums = map_chunks(10, 3, |start, len| (start..start + len).sum::<usize>());
        assert_eq!(sums.iter().sum::<usize>(), (0..10).sum::<usize>());
        assert_eq!(sums.len(), 4);
    }
}
