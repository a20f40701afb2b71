//! Execution helpers: data-parallel maps with a sequential fallback.
//!
//! With the `parallel` feature (the default) [`map`] and [`map_range`] fan
//! work out over rayon; without it they degrade to plain iteration and the
//! crate has no thread dependencies at all. The `*_seq` twins are always
//! compiled so the bench suite can compare both code paths within a single
//! build.
//!
//! Every helper preserves input order in its output, so results are identical
//! (bit for bit) regardless of thread count. Reductions that are sensitive to
//! floating-point summation order are deliberately kept sequential at the call
//! sites instead of being routed through here.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `op` over `items`, in parallel when the `parallel` feature is enabled.
pub fn map<T, R, F>(items: &[T], op: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(op).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_seq(items, op)
    }
}

/// Sequential twin of [`map`].
pub fn map_seq<T, R, F>(items: &[T], op: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(op).collect()
}

/// Maps `op` over `0..n`, in parallel when the `parallel` feature is enabled.
pub fn map_range<R, F>(n: usize, op: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(op).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_range_seq(n, op)
    }
}

/// Sequential twin of [`map_range`].
pub fn map_range_seq<R, F>(n: usize, op: F) -> Vec<R>
where
    F: Fn(usize) -> R,
{
    (0..n).map(op).collect()
}

/// Caps worker parallelism. `threads == 0` keeps the library default (one
/// worker per logical CPU). Returns the effective worker count.
///
/// The global pool can only be sized once per process; later calls with a
/// different cap are ignored. Without the `parallel` feature this always
/// returns 1.
pub fn configure_threads(threads: usize) -> usize {
    #[cfg(feature = "parallel")]
    {
        if threads > 0 {
            // Error means the pool already exists; the existing size wins.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build_global();
        }
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let xs: Vec<i64> = (0..1000).collect();
        let doubled = map(&xs, |x| x * 2);
        let doubled_seq = map_seq(&xs, |x| x * 2);
        assert_eq!(doubled, doubled_seq);
        assert_eq!(doubled[17], 34);
    }

    #[test]
    fn map_range_matches_seq() {
        assert_eq!(map_range(100, |i| i * i), map_range_seq(100, |i| i * i));
    }

    #[test]
    fn configure_threads_reports_positive_count() {
        assert!(configure_threads(0) >= 1);
    }
}
