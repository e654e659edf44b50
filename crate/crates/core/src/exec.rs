//! Ordered map over independent work items.
//!
//! Results always come back in input order, so reductions over them are
//! bit-identical whichever execution mode is used.

/// How data-parallel loops (batch gradients, evaluation episodes, seed sweeps)
/// are executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    /// Rayon work stealing. Falls back to sequential when the `parallel`
    /// feature is disabled.
    #[default]
    Parallel,
}

impl Execution {
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            Execution::Sequential => items.iter().map(f).collect(),
            Execution::Parallel => par_map(items, f),
        }
    }

    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        let idx: Vec<usize> = (0..n).collect();
        self.map(&idx, |&i| f(i))
    }
}

#[cfg(feature = "parallel")]
fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}
