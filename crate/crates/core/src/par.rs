//! Data-parallel helpers. With the `parallel` feature the work is spread over
//! the rayon pool; without it, or with [`Exec::Sequential`], the same closures
//! run in order on the calling thread. Results are always returned in input
//! order, so both modes produce identical output.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

pub fn num_threads() -> usize {
    #[cfg(feature = "parallel")]
    return rayon::current_num_threads();

    #[cfg(not(feature = "parallel"))]
    return 1;
}

/// Map `f` over `items`, collecting results in order.
pub fn map<T, R, F>(exec: Exec, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Send + Sync,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => items.par_iter().map(f).collect(),
        _ => items.iter().map(f).collect(),
    }
}

/// Fallible variant of [`map`]; the first error in input order wins.
pub fn try_map<T, R, E, F>(exec: Exec, items: &[T], f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Send + Sync,
{
    map(exec, items, f).into_iter().collect()
}

/// Caps the global rayon pool. A no-op without the `parallel` feature.
pub fn init_pool(jobs: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = jobs;
}
